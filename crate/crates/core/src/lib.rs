//! Bayesian fusion of Gaussian-process predictive densities.
//!
//! Four fusion models are provided, each as a differentiable log-posterior
//! sampled with NUTS:
//!
//! * **BHS**: Bayesian hierarchical stacking of pre-trained GP experts with
//!   softmax weights (linear pooling).
//! * **P-BHS**: stacking with log-linear pooling and positive, input-dependent
//!   weights (generalized product of experts).
//! * **MoGPE**: jointly learned heteroscedastic GP experts with a softmax gate.
//! * **PoGPE**: jointly learned experts fused by log-linear pooling.
//!
//! A heteroscedastic RFF-GP serves as a single-model baseline. All latent
//! functions are random-Fourier-feature GPs.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the experiment
//! pipeline (`synthetic`, `experts`, `eval`) uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod experts;
pub mod fusion;
pub mod kernel;
pub mod linalg;
pub mod models;
pub mod rff;
pub mod sampler;
pub mod scalar;
pub mod seeds;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type KernelParams = kernel::KernelParams<f64>;
pub type ExactGpPosterior = kernel::ExactGpPosterior<f64>;
pub type GaussianPrediction = fusion::GaussianPrediction<f64>;
pub type SimplexWeights = fusion::SimplexWeights<f64>;
pub type PositiveWeights = fusion::PositiveWeights<f64>;
pub type MixturePdf = fusion::MixturePdf<f64>;
pub type RffBasis = rff::RffBasis<f64>;
pub type RffWeights = rff::RffWeights<f64>;
pub type PosteriorSamples = sampler::PosteriorSamples<f64>;
pub type FusionModel = models::FusionModel<f64>;
pub type FusionModelSpec = models::FusionModelSpec<f64>;

pub use kernel::PredictiveSpace;
pub use models::Method;
pub use sampler::{ChainConfig, LogDensityModel};
