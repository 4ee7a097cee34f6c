use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gpfuse::Method;

#[derive(Debug, Parser)]
#[command(
    name = "gpfuse",
    version,
    about = "Fuse Gaussian-process experts by linear and log-linear pooling",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset and its train/test split.
    Generate,
    /// Train K GP experts on half of the training data.
    TrainExperts,
    /// Sample a fusion model's posterior and score it on test data.
    Fit,
    /// Score saved posterior samples on test data.
    Evaluate,
    /// Run an experiment sweep over K or M.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Re-check the config and file hashes of every run in --out.
    Verify,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum SweepKind {
    /// Vary the number of experts (--k list) at fixed --m.
    Experts,
    /// Vary the number of frequencies (--m list) at fixed --k.
    Frequencies,
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fusion method: bhs, pbhs, mogpe, pogpe or hetgp.
    #[arg(long, global = true)]
    pub method: Option<Method>,
    /// Number of experts; a comma-separated list for `sweep experts`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Number of random frequencies; a list for `sweep frequencies`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Number of MCMC chains.
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    /// Post-warmup draws per chain.
    #[arg(long, global = true)]
    pub draws: Option<usize>,
    /// Warmup iterations per chain.
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "GPFUSE_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Exit with status 3 when a run fails to converge.
    #[arg(long, global = true)]
    pub strict: bool,
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Number of data points to generate.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Training data CSV, or a directory written by `generate`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Test data CSV.
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    /// Expert ensemble JSON written by `train-experts`.
    #[arg(long, global = true)]
    pub experts: Option<PathBuf>,
    /// Samples CSV written by `fit`.
    #[arg(long, global = true)]
    pub samples: Option<PathBuf>,
    /// Number of random splits in a sweep.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Per-cell wall-clock budget in seconds for sweeps.
    #[arg(long, global = true)]
    pub timeout: Option<f64>,
}
