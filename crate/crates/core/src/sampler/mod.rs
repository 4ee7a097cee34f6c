//! Gradient-based MCMC over differentiable log-densities.
//!
//! [`nuts_sample`] runs independent NUTS chains with dual-averaging step
//! size adaptation and a diagonal metric estimated during warmup. Chains
//! get their own counter-derived seeds, so results do not depend on how
//! many threads execute them.

mod adaptation;
mod diagnostics;
mod nuts;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub use adaptation::DualAveraging;
pub use diagnostics::{
    effective_sample_size, mean_of_exp_log, monte_carlo_standard_error,
    posterior_predictive_logpdf, potential_scale_reduction, split_rhat,
};
pub use nuts::nuts_sample;

/// Unnormalized log-density with gradient over a flat parameter vector.
///
/// Implementations must be pure in `position` so chains can call them from
/// several threads at once.
pub trait LogDensityModel<T: Scalar>: Sync {
    fn dim(&self) -> usize;

    /// Writes `∇ log p(position)` into `gradient` and returns `log p(position)`.
    /// A point outside the support returns `-∞`.
    fn log_density_and_gradient(&self, position: &[T], gradient: &mut [T]) -> T;

    fn log_density(&self, position: &[T]) -> T {
        let mut g = vec![T::zero(); self.dim()];
        self.log_density_and_gradient(position, &mut g)
    }
}

/// Adapts a closure `(position, gradient) -> log p` into a [`LogDensityModel`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T, F> LogDensityModel<T> for FnDensity<F>
where
    T: Scalar,
    F: Fn(&[T], &mut [T]) -> T + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_gradient(&self, position: &[T], gradient: &mut [T]) -> T {
        (self.f)(position, gradient)
    }
}

/// NUTS run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub chains: usize,
    pub warmup_draws: usize,
    pub kept_draws: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    /// Each chain starts at `init + N(0, init_jitter²)` per coordinate.
    pub init_jitter: f64,
    /// Hamiltonian error beyond which a transition is divergent.
    pub max_energy_error: f64,
    #[serde(skip)]
    pub deadline: Option<Instant>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup_draws: 500,
            kept_draws: 500,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            init_jitter: 0.0,
            max_energy_error: 1000.0,
            deadline: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error::InvalidParameter;
        if self.chains < 1 {
            return Err(InvalidParameter("chains must be >= 1".into()));
        }
        if self.kept_draws < 1 {
            return Err(InvalidParameter("kept draws must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(InvalidParameter("target_accept must lie in (0, 1)".into()));
        }
        if self.max_tree_depth < 1 {
            return Err(InvalidParameter("max_tree_depth must be >= 1".into()));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(InvalidParameter("init_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-chain sampler statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    #[serde(deserialize_with = "nan_or_f64")]
    pub step_size: f64,
    pub divergences: usize,
    #[serde(deserialize_with = "nan_or_f64")]
    pub mean_accept: f64,
    #[serde(deserialize_with = "nan_or_f64")]
    pub mean_tree_depth: f64,
    pub max_depth_hits: usize,
    pub inverse_metric: Vec<f64>,
}

/// JSON writes non-finite floats as `null`; read them back as NaN.
fn nan_or_f64<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Post-warmup draws laid out as `chains × kept_draws × dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples<T> {
    chains: usize,
    draws_per_chain: usize,
    dim: usize,
    draws: Vec<T>,
    log_density: Vec<T>,
    stats: Vec<ChainStats>,
}

impl<T: Scalar> PosteriorSamples<T> {
    /// Assembles samples from per-chain draw buffers (each `draws_per_chain × dim`).
    pub fn from_chains(dim: usize, chains: Vec<(Vec<T>, Vec<T>, ChainStats)>) -> Self {
        let n_chains = chains.len();
        let draws_per_chain = chains.first().map_or(0, |c| c.1.len());
        let mut draws = Vec::with_capacity(n_chains * draws_per_chain * dim);
        let mut log_density = Vec::with_capacity(n_chains * draws_per_chain);
        let mut stats = Vec::with_capacity(n_chains);
        for (d, lp, s) in chains {
            assert_eq!(d.len(), draws_per_chain * dim);
            assert_eq!(lp.len(), draws_per_chain);
            draws.extend(d);
            log_density.extend(lp);
            stats.push(s);
        }
        Self {
            chains: n_chains,
            draws_per_chain,
            dim,
            draws,
            log_density,
            stats,
        }
    }

    /// Builds samples from raw draws without sampler statistics.
    pub fn from_draws(dim: usize, chains: Vec<Vec<Vec<T>>>) -> Self {
        let packed = chains
            .into_iter()
            .map(|c| {
                let lp = vec![T::nan(); c.len()];
                let flat: Vec<T> = c.into_iter().flatten().collect();
                let stats = ChainStats {
                    step_size: f64::NAN,
                    divergences: 0,
                    mean_accept: f64::NAN,
                    mean_tree_depth: f64::NAN,
                    max_depth_hits: 0,
                    inverse_metric: vec![1.0; dim],
                };
                (flat, lp, stats)
            })
            .collect();
        Self::from_chains(dim, packed)
    }

    pub fn chains(&self) -> usize {
        self.chains
    }

    pub fn draws_per_chain(&self) -> usize {
        self.draws_per_chain
    }

    pub fn total_draws(&self) -> usize {
        self.chains * self.draws_per_chain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draw(&self, chain: usize, index: usize) -> &[T] {
        let start = (chain * self.draws_per_chain + index) * self.dim;
        &self.draws[start..start + self.dim]
    }

    /// All draws in chain-major order.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[T]> + '_ {
        let dim = self.dim;
        (0..self.total_draws()).map(move |i| &self.draws[i * dim..(i + 1) * dim])
    }

    /// Rewrites every draw in place.
    pub fn transform_draws(&mut self, f: impl FnMut(&mut [T])) {
        if self.dim > 0 {
            self.draws.chunks_exact_mut(self.dim).for_each(f);
        }
    }

    pub fn log_density(&self, chain: usize, index: usize) -> T {
        self.log_density[chain * self.draws_per_chain + index]
    }

    /// `chains × draws` trace of one coordinate.
    pub fn coordinate_trace(&self, coordinate: usize) -> Vec<Vec<f64>> {
        (0..self.chains)
            .map(|c| {
                (0..self.draws_per_chain)
                    .map(|i| self.draw(c, i)[coordinate].to_f64_lossy())
                    .collect()
            })
            .collect()
    }

    /// `chains × draws` trace of the log-density.
    pub fn log_density_trace(&self) -> Vec<Vec<f64>> {
        (0..self.chains)
            .map(|c| {
                (0..self.draws_per_chain)
                    .map(|i| self.log_density(c, i).to_f64_lossy())
                    .collect()
            })
            .collect()
    }

    pub fn stats(&self) -> &[ChainStats] {
        &self.stats
    }

    pub fn divergence_count(&self) -> Vec<usize> {
        self.stats.iter().map(|s| s.divergences).collect()
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.step_size).collect()
    }

    pub fn total_divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }
}
