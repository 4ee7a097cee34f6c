use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Cholesky factorization failed after jitter {jitter:e}")]
    CholeskyFailure { jitter: f64 },

    #[error("fused precision {precision:e} fell below floor {floor:e}")]
    PrecisionUnderflow { precision: f64, floor: f64 },

    #[error("log density or gradient is not finite at the initial point")]
    NonFiniteDensity,

    #[error("every post-warmup transition diverged")]
    AllDivergent,

    #[error("split-Rhat needs at least 2 chains with 4 draws each, got {chains} x {draws}")]
    InsufficientChains { chains: usize, draws: usize },

    #[error("cannot split {points} points into {blocks} blocks")]
    TooFewPoints { points: usize, blocks: usize },

    #[error("hyperparameter optimization failed: every restart was non-finite")]
    OptimizationFailure,

    #[error("{lost} of {total} posterior draws lost to precision underflow")]
    DrawLoss { lost: usize, total: usize },

    #[error("run exceeded its wall-clock budget")]
    Timeout,

    #[error("missing input: {0}")]
    Missing(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
