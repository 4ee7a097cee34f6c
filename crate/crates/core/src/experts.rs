//! Exact-GP experts for stacking: partitioning, type-II maximum likelihood
//! and batched prediction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::GaussianPrediction;
use crate::kernel::{
    gp_fit, gp_predict, log_marginal_likelihood_with_gradient, ExactGpPosterior, KernelParams,
    PredictiveSpace,
};
use crate::linalg::Matrix;
use crate::seeds::{derive_seed, rng_from_seed, stream};
use crate::synthetic::Dataset;

pub const ENSEMBLE_FORMAT: &str = "gpfuse-experts/1";

/// Random disjoint blocks of `⌊n/K⌋` indices each; the remainder is unused.
pub fn partition_data(indices: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = indices.len();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints {
            points: n,
            blocks: k,
        });
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut rng_from_seed(seed));
    let size = n / k;
    Ok(shuffled
        .chunks_exact(size)
        .take(k)
        .map(<[usize]>::to_vec)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Initial log-hyperparameters are uniform on this interval.
    pub init_log_range: (f64, f64),
    /// Box on every log-hyperparameter during optimization.
    pub log_bounds: (f64, f64),
    /// Points per expert; `None` means `⌊n/K⌋` of the expert pool.
    pub block_size: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iterations: 200,
            gradient_tolerance: 1e-5,
            init_log_range: (0.05f64.ln(), 2f64.ln()),
            log_bounds: (-14.0, 8.0),
            block_size: None,
        }
    }
}

/// Outcome of one optimization run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartResult {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub log_params: [f64; 3],
    pub iterations: usize,
}

fn objective(x: &Matrix<f64>, y: &[f64], log: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let params = KernelParams::from_log(log);
    match log_marginal_likelihood_with_gradient(x, y, &params) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|d| d.is_finite()) => Some((v, g)),
        _ => None,
    }
}

/// Projected BFGS ascent with backtracking on the log-hyperparameters.
fn maximize(
    x: &Matrix<f64>,
    y: &[f64],
    start: [f64; 3],
    config: &TrainingConfig,
) -> Option<RestartResult> {
    let (lo, hi) = config.log_bounds;
    let clamp = |p: [f64; 3]| p.map(|v| v.clamp(lo, hi));
    let mut p = clamp(start);
    let (mut f, mut g) = objective(x, y, p)?;
    let initial = f;
    let mut h = [[0.0; 3]; 3];
    let reset = |h: &mut [[f64; 3]; 3]| {
        *h = [[0.0; 3]; 3];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 1.0;
        }
    };
    reset(&mut h);
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        // projected gradient: ignore components pushing against an active bound
        let active = |i: usize, d: f64| (p[i] <= lo && d < 0.0) || (p[i] >= hi && d > 0.0);
        let norm = g
            .iter()
            .enumerate()
            .filter(|&(i, &d)| !active(i, d))
            .map(|(_, d)| d * d)
            .sum::<f64>()
            .sqrt();
        if norm < config.gradient_tolerance {
            break;
        }
        let mut dir = [0.0; 3];
        for i in 0..3 {
            dir[i] = (0..3).map(|j| h[i][j] * g[j]).sum();
        }
        let mut slope: f64 = (0..3).map(|i| dir[i] * g[i]).sum();
        if !(slope > 0.0) {
            reset(&mut h);
            dir = g;
            slope = norm * norm;
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand = clamp([p[0] + t * dir[0], p[1] + t * dir[1], p[2] + t * dir[2]]);
            if let Some((fc, gc)) = objective(x, y, cand) {
                if fc >= f + 1e-4 * t * slope.min(f64::MAX) || (fc > f && t < 1e-6) {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        let s: [f64; 3] = std::array::from_fn(|i| cand[i] - p[i]);
        // curvature of −f
        let yv: [f64; 3] = std::array::from_fn(|i| g[i] - gc[i]);
        let sy: f64 = (0..3).map(|i| s[i] * yv[i]).sum();
        if sy > 1e-12 {
            let hy: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| h[i][j] * yv[j]).sum());
            let yhy: f64 = (0..3).map(|i| yv[i] * hy[i]).sum();
            for i in 0..3 {
                for j in 0..3 {
                    h[i][j] +=
                        (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        let improvement = fc - f;
        p = cand;
        f = fc;
        g = gc;
        if improvement.abs() < 1e-12 * (1.0 + f.abs()) {
            break;
        }
    }
    Some(RestartResult {
        initial_objective: initial,
        final_objective: f,
        log_params: p,
        iterations,
    })
}

/// Type-II maximum likelihood over `(ln σ_f², ln ℓ, ln σ_n²)` with random
/// restarts; returns the fitted expert and every restart's outcome.
pub fn train_expert_with_restarts(
    x: &Matrix<f64>,
    y: &[f64],
    config: &TrainingConfig,
    seed: u64,
) -> Result<(ExactGpPosterior<f64>, Vec<RestartResult>)> {
    if y.len() < 2 {
        return Err(Error::TooFewPoints {
            points: y.len(),
            blocks: 1,
        });
    }
    let mut rng = rng_from_seed(seed);
    let (a, b) = config.init_log_range;
    let starts: Vec<[f64; 3]> = (0..config.restarts.max(1))
        .map(|_| {
            [
                rng.gen_range(a..=b),
                rng.gen_range(a..=b),
                rng.gen_range(a..=b),
            ]
        })
        .collect();
    let results: Vec<RestartResult> = starts
        .into_iter()
        .filter_map(|s| maximize(x, y, s, config))
        .collect();
    let best = results
        .iter()
        .max_by(|p, q| p.final_objective.total_cmp(&q.final_objective))
        .ok_or(Error::OptimizationFailure)?;
    let posterior = gp_fit(x, y, &KernelParams::from_log(best.log_params))?;
    Ok((posterior, results))
}

pub fn train_expert(
    x: &Matrix<f64>,
    y: &[f64],
    config: &TrainingConfig,
    seed: u64,
) -> Result<ExactGpPosterior<f64>> {
    train_expert_with_restarts(x, y, config, seed).map(|(p, _)| p)
}

/// SHA-256 of the dataset's inputs and targets, bitwise.
pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.x.rows() as u64).to_le_bytes());
    h.update((ds.x.cols() as u64).to_le_bytes());
    for v in ds.x.as_slice().iter().chain(&ds.y) {
        h.update(v.to_bits().to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

#[derive(Clone, Debug)]
pub struct ExpertEnsemble {
    pub experts: Vec<ExactGpPosterior<f64>>,
    /// Row indices into the expert pool, one block per expert.
    pub blocks: Vec<Vec<usize>>,
    pub dataset_hash: String,
}

/// Partitions `pool` into `k` blocks and trains one expert per block.
pub fn train_ensemble(
    pool: &Dataset,
    k: usize,
    config: &TrainingConfig,
    seed: u64,
) -> Result<ExpertEnsemble> {
    let all: Vec<usize> = (0..pool.len()).collect();
    let mut blocks = partition_data(&all, k, derive_seed(seed, &[stream::PARTITION]))?;
    if let Some(size) = config.block_size {
        if size == 0 || size > pool.len() / k {
            return Err(Error::InvalidParameter(format!(
                "block size {size} does not fit {k} blocks in {} points",
                pool.len()
            )));
        }
        blocks.iter_mut().for_each(|b| b.truncate(size));
    }
    let experts = blocks
        .par_iter()
        .enumerate()
        .map(|(i, block)| {
            let sub = pool.subset(block);
            train_expert(
                &sub.x,
                &sub.y,
                config,
                derive_seed(seed, &[stream::RESTARTS, i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertEnsemble {
        experts,
        blocks,
        dataset_hash: dataset_hash(pool),
    })
}

/// Observation-space predictions of every expert at every query row.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPredictions {
    pub means: Matrix<f64>,
    pub variances: Matrix<f64>,
}

impl ExpertPredictions {
    pub fn rows(&self) -> usize {
        self.means.rows()
    }

    pub fn k(&self) -> usize {
        self.means.cols()
    }

    pub fn row(&self, n: usize) -> Vec<GaussianPrediction<f64>> {
        (0..self.k())
            .map(|k| GaussianPrediction {
                mean: self.means[(n, k)],
                variance: self.variances[(n, k)],
            })
            .collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<GaussianPrediction<f64>>> {
        (0..self.rows()).map(|n| self.row(n)).collect()
    }
}

pub fn predict_all(ensemble: &ExpertEnsemble, x: &Matrix<f64>) -> ExpertPredictions {
    let k = ensemble.experts.len();
    let mut means = Matrix::zeros(x.rows(), k);
    let mut variances = Matrix::zeros(x.rows(), k);
    for n in 0..x.rows() {
        for (j, e) in ensemble.experts.iter().enumerate() {
            let p = gp_predict(e, x.row(n), PredictiveSpace::Observation);
            means[(n, j)] = p.mean;
            variances[(n, j)] = p.variance;
        }
    }
    ExpertPredictions { means, variances }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub amplitude: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
    pub block: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub format: String,
    pub dataset_hash: String,
    pub experts: Vec<ExpertRecord>,
}

impl ExpertEnsemble {
    pub fn to_file(&self) -> EnsembleFile {
        EnsembleFile {
            format: ENSEMBLE_FORMAT.into(),
            dataset_hash: self.dataset_hash.clone(),
            experts: self
                .experts
                .iter()
                .zip(&self.blocks)
                .map(|(e, b)| ExpertRecord {
                    amplitude: e.params.amplitude,
                    lengthscale: e.params.lengthscale,
                    noise_variance: e.params.noise_variance,
                    block: b.clone(),
                })
                .collect(),
        }
    }

    /// Refits the recorded experts on `pool`, which must hash to the
    /// recorded dataset.
    pub fn from_file(file: &EnsembleFile, pool: &Dataset) -> Result<Self> {
        if file.format != ENSEMBLE_FORMAT {
            return Err(Error::Format(format!(
                "unsupported ensemble format `{}`",
                file.format
            )));
        }
        let hash = dataset_hash(pool);
        if hash != file.dataset_hash {
            return Err(Error::Format(format!(
                "ensemble was trained on dataset {} but the given pool hashes to {hash}",
                file.dataset_hash
            )));
        }
        let experts = file
            .experts
            .iter()
            .map(|r| {
                if r.block.iter().any(|&i| i >= pool.len()) {
                    return Err(Error::Format("block index out of range".into()));
                }
                let sub = pool.subset(&r.block);
                gp_fit(
                    &sub.x,
                    &sub.y,
                    &KernelParams::new(r.amplitude, r.lengthscale, r.noise_variance)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            experts,
            blocks: file.experts.iter().map(|r| r.block.clone()).collect(),
            dataset_hash: hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path, pool: &Dataset) -> Result<Self> {
        let file: EnsembleFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_file(&file, pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_block_sizes() {
        let idx: Vec<usize> = (0..10).collect();
        let p = partition_data(&idx, 2, 1).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
        let p3 = partition_data(&idx, 3, 1).unwrap();
        assert_eq!(p3.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3]);
        let mut seen: Vec<usize> = p3.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(partition_data(&idx, 3, 1).unwrap(), p3);
        assert!(matches!(
            partition_data(&idx[..2], 3, 0),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn restarts_never_decrease_objective() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| (6.0 * x).sin()).collect();
        let (_, runs) =
            train_expert_with_restarts(&Matrix::column(&xs), &y, &TrainingConfig::default(), 3)
                .unwrap();
        let best = runs
            .iter()
            .map(|r| r.final_objective)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in &runs {
            assert!(r.final_objective >= r.initial_objective);
            assert!(best >= r.initial_objective);
        }
    }

    #[test]
    fn predict_all_matches_pointwise() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let pool = Dataset::new(Matrix::column(&xs), y).unwrap();
        let ens = train_ensemble(&pool, 2, &TrainingConfig::default(), 5).unwrap();
        let q = Matrix::column(&[0.05, 0.5, 3.0]);
        let preds = predict_all(&ens, &q);
        for n in 0..3 {
            for k in 0..2 {
                let p = gp_predict(&ens.experts[k], q.row(n), PredictiveSpace::Observation);
                assert_eq!(preds.means[(n, k)], p.mean);
                assert_eq!(preds.variances[(n, k)], p.variance);
            }
        }
    }

    #[test]
    fn ensemble_file_round_trip() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| (3.0 * x).cos()).collect();
        let pool = Dataset::new(Matrix::column(&xs), y).unwrap();
        let ens = train_ensemble(&pool, 2, &TrainingConfig::default(), 8).unwrap();
        let back = ExpertEnsemble::from_file(&ens.to_file(), &pool).unwrap();
        let q = Matrix::column(&[0.3, 0.7]);
        assert_eq!(predict_all(&ens, &q), predict_all(&back, &q));
        let other = Dataset::new(Matrix::column(&xs), vec![0.0; 12]).unwrap();
        assert!(ExpertEnsemble::from_file(&ens.to_file(), &other).is_err());
    }
}
