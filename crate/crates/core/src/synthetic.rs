//! Synthetic one-dimensional mixture-of-GP-experts data.
//!
//! Each component has a smooth mean function and a smooth unnormalized
//! weight function, both drawn from zero-mean RBF GPs. A point's component
//! is sampled from the softmax of the weights at its input, and its target
//! from that component's Gaussian.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{softmax_vec, GaussianPrediction, MixturePdf, SimplexWeights};
use crate::kernel::{cholesky_with_jitter, gram_matrix, KernelParams};
use crate::linalg::{Cholesky, Matrix};
use crate::seeds::{derive_seed, rng_from_seed, stream};

pub const DATASET_FORMAT: &str = "gpfuse-dataset/1";

/// Observation noise of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// The same noise scale for every component and input.
    Constant { scale: f64 },
    /// Per-component scales, one per component.
    PerComponent { scales: Vec<f64> },
    /// `log σ_k(x)` drawn from an RBF GP with mean `ln(base_scale)`.
    GpLogScale {
        base_scale: f64,
        lengthscale: f64,
        amplitude: f64,
    },
}

impl NoiseModel {
    pub fn gp_log_scale() -> Self {
        NoiseModel::GpLogScale {
            base_scale: 0.1,
            lengthscale: 0.5,
            amplitude: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n: usize,
    pub k_true: usize,
    pub lengthscale_weights: f64,
    pub lengthscale_means: f64,
    pub amplitude_weights: f64,
    pub amplitude_means: f64,
    pub noise: NoiseModel,
    pub input_range: (f64, f64),
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            k_true: 3,
            lengthscale_weights: 0.5,
            lengthscale_means: 0.2,
            amplitude_weights: 1.0,
            amplitude_means: 1.0,
            noise: NoiseModel::Constant { scale: 0.1 },
            input_range: (0.0, 1.0),
            grid_size: 2048,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.n == 0 {
            return bad("number of points must be >= 1");
        }
        if self.k_true == 0 {
            return bad("number of true components must be >= 1");
        }
        for (name, v) in [
            ("weight lengthscale", self.lengthscale_weights),
            ("mean lengthscale", self.lengthscale_means),
            ("weight amplitude", self.amplitude_weights),
            ("mean amplitude", self.amplitude_means),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        let (lo, hi) = self.input_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return bad("input range must satisfy lo < hi");
        }
        if self.grid_size < 2 {
            return bad("grid size must be >= 2");
        }
        match &self.noise {
            NoiseModel::Constant { scale } if !(*scale >= 0.0) || !scale.is_finite() => {
                bad("noise scale must be >= 0")
            }
            NoiseModel::PerComponent { scales } if scales.len() != self.k_true => {
                Err(Error::InvalidParameter(format!(
                    "{} noise scales for {} components",
                    scales.len(),
                    self.k_true
                )))
            }
            NoiseModel::PerComponent { scales }
                if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) =>
            {
                bad("noise scales must be >= 0")
            }
            NoiseModel::GpLogScale {
                base_scale,
                lengthscale,
                amplitude,
            } if !(*base_scale > 0.0 && *lengthscale > 0.0 && *amplitude > 0.0) => {
                bad("log-scale GP needs positive base scale, lengthscale and amplitude")
            }
            _ => Ok(()),
        }
    }
}

/// The generating functions, tabulated on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub grid: Vec<f64>,
    /// `logits[k][g]`: unnormalized weight of component `k` at grid point `g`.
    pub logits: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub log_scales: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let g = &self.grid;
        let last = g.len() - 1;
        if x <= g[0] {
            return values[0];
        }
        if x >= g[last] {
            return values[last];
        }
        let step = (g[last] - g[0]) / last as f64;
        let i = (((x - g[0]) / step) as usize).min(last - 1);
        if values[i] == values[i + 1] {
            return values[i];
        }
        let t = (x - g[i]) / (g[i + 1] - g[i]);
        values[i] + t * (values[i + 1] - values[i])
    }

    pub fn logits_at(&self, x: f64) -> Vec<f64> {
        self.logits.iter().map(|l| self.interpolate(l, x)).collect()
    }

    pub fn weights_at(&self, x: f64) -> Vec<f64> {
        softmax_vec(&self.logits_at(x))
    }

    pub fn means_at(&self, x: f64) -> Vec<f64> {
        self.means.iter().map(|m| self.interpolate(m, x)).collect()
    }

    pub fn scales_at(&self, x: f64) -> Vec<f64> {
        self.log_scales
            .iter()
            .map(|s| self.interpolate(s, x).exp())
            .collect()
    }

    /// The true conditional density of `y` at `x`; fails for zero noise.
    pub fn mixture_at(&self, x: f64) -> Result<MixturePdf<f64>> {
        let comps = self
            .means_at(x)
            .into_iter()
            .zip(self.scales_at(x))
            .map(|(m, s)| GaussianPrediction::new(m, s * s))
            .collect::<Result<Vec<_>>>()?;
        MixturePdf::new(comps, SimplexWeights::new(self.weights_at(x))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix<f64>,
    pub y: Vec<f64>,
    /// True component of each point, when known.
    pub component: Option<Vec<usize>>,
    pub config: Option<GeneratorConfig>,
    pub ground_truth: Option<GroundTruth>,
}

fn grid_draws(
    grid: &Matrix<f64>,
    lengthscale: f64,
    amplitude: f64,
    count: usize,
    seed: u64,
    cache: &mut Vec<(f64, Cholesky<f64>)>,
) -> Result<Vec<Vec<f64>>> {
    if !cache.iter().any(|(l, _)| *l == lengthscale) {
        let params = KernelParams::new(1.0, lengthscale, 0.0)?;
        let (chol, _) = cholesky_with_jitter(&gram_matrix(grid, &params, false), 1.0)?;
        cache.push((lengthscale, chol));
    }
    let chol = &cache
        .iter()
        .find(|(l, _)| *l == lengthscale)
        .expect("cached")
        .1;
    let sd = amplitude.sqrt();
    Ok((0..count)
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, &[k as u64]));
            let z: Vec<f64> = (0..grid.rows())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            chol.mul_lower(&z).into_iter().map(|v| sd * v).collect()
        })
        .collect())
}

/// Draws a dataset; deterministic in `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let (lo, hi) = config.input_range;
    let g = config.grid_size;
    let grid_points: Vec<f64> = (0..g)
        .map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64)
        .collect();
    let grid = Matrix::column(&grid_points);
    let root = derive_seed(config.seed, &[stream::DATA]);
    let k = config.k_true;

    let mut cache = Vec::new();
    let logits = grid_draws(
        &grid,
        config.lengthscale_weights,
        config.amplitude_weights,
        k,
        derive_seed(root, &[0]),
        &mut cache,
    )?;
    let means = grid_draws(
        &grid,
        config.lengthscale_means,
        config.amplitude_means,
        k,
        derive_seed(root, &[1]),
        &mut cache,
    )?;
    let log_scales = match &config.noise {
        NoiseModel::Constant { scale } => vec![vec![scale.ln(); g]; k],
        NoiseModel::PerComponent { scales } => scales.iter().map(|s| vec![s.ln(); g]).collect(),
        NoiseModel::GpLogScale {
            base_scale,
            lengthscale,
            amplitude,
        } => grid_draws(
            &grid,
            *lengthscale,
            *amplitude,
            k,
            derive_seed(root, &[2]),
            &mut cache,
        )?
        .into_iter()
        .map(|d| d.into_iter().map(|v| v + base_scale.ln()).collect())
        .collect(),
    };
    let truth = GroundTruth {
        grid: grid_points,
        logits,
        means,
        log_scales,
    };

    let mut rng = rng_from_seed(derive_seed(root, &[3]));
    let mut xs = Vec::with_capacity(config.n);
    let mut ys = Vec::with_capacity(config.n);
    let mut component = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let x = rng.gen_range(lo..=hi);
        let w = truth.weights_at(x);
        let u: f64 = rng.gen();
        let mut c = k - 1;
        let mut acc = 0.0;
        for (i, wi) in w.iter().enumerate() {
            acc += wi;
            if u < acc {
                c = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let mean = truth.interpolate(&truth.means[c], x);
        let scale = truth.interpolate(&truth.log_scales[c], x).exp();
        xs.push(x);
        ys.push(mean + scale * z);
        component.push(c);
    }
    Ok(Dataset {
        x: Matrix::column(&xs),
        y: ys,
        component: Some(component),
        config: Some(config.clone()),
        ground_truth: Some(truth),
    })
}

impl Dataset {
    pub fn new(x: Matrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs but {} targets",
                x.rows(),
                y.len()
            )));
        }
        if x.as_slice().iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "dataset entries must be finite".into(),
            ));
        }
        Ok(Self {
            x,
            y,
            component: None,
            config: None,
            ground_truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `indices`, in that order; provenance is kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            component: self
                .component
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            config: self.config.clone(),
            ground_truth: self.ground_truth.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.input_dim() != 1 {
            return Err(Error::Format(
                "dataset CSV holds one-dimensional inputs".into(),
            ));
        }
        let mut out = String::with_capacity(self.len() * 48);
        out.push_str(if self.component.is_some() {
            "x,y,component\n"
        } else {
            "x,y\n"
        });
        for i in 0..self.len() {
            out.push_str(&format!("{:.16e},{:.16e}", self.x[(i, 0)], self.y[i]));
            if let Some(c) = &self.component {
                out.push_str(&format!(",{}", c[i]));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let with_component = match headers.iter().map(String::as_str).collect::<Vec<_>>()[..] {
            ["x", "y"] => false,
            ["x", "y", "component"] => true,
            _ => {
                return Err(Error::Format(format!(
                    "{}: expected header `x,y[,component]`, got `{}`",
                    path.display(),
                    headers.join(",")
                )))
            }
        };
        let parse = |s: &str, line: usize| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{}:{line}: `{s}`: {e}", path.display())))
        };
        let (mut xs, mut ys, mut cs) = (Vec::new(), Vec::new(), Vec::new());
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let line = i + 2;
            xs.push(parse(&record[0], line)?);
            ys.push(parse(&record[1], line)?);
            if with_component {
                cs.push(record[2].trim().parse::<usize>().map_err(|e| {
                    Error::Format(format!("{}:{line}: component: {e}", path.display()))
                })?);
            }
        }
        let mut ds = Dataset::new(Matrix::column(&xs), ys)?;
        if with_component {
            ds.component = Some(cs);
        }
        Ok(ds)
    }

    /// Writes `<path>` and the JSON sidecar `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(path)?;
        let meta = DatasetMeta {
            format: DATASET_FORMAT.into(),
            n: self.len(),
            input_dim: self.input_dim(),
            generator: self.config.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a dataset and, if present, its sidecar. Ground truth is not
    /// restored; regenerate from the config when needed.
    pub fn load(path: &Path) -> Result<Dataset> {
        let mut ds = Dataset::read_csv(path)?;
        let side = sidecar_path(path);
        if side.exists() {
            let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&side)?)?;
            if meta.format != DATASET_FORMAT {
                return Err(Error::Format(format!(
                    "unsupported dataset format `{}`",
                    meta.format
                )));
            }
            if meta.n != ds.len() {
                return Err(Error::Format(format!(
                    "sidecar says {} rows, CSV has {}",
                    meta.n,
                    ds.len()
                )));
            }
            ds.config = meta.generator;
        }
        Ok(ds)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    n: usize,
    input_dim: usize,
    generator: Option<GeneratorConfig>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Random disjoint index sets of sizes `⌊n·frac⌋` and the remainder, each
/// sorted ascending.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {train_frac}"
        )));
    }
    let n_train = (n as f64 * train_frac).floor() as usize;
    Ok(shuffled_halves(n, n_train, seed))
}

fn shuffled_halves(n: usize, first: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut a = idx[..first].to_vec();
    let mut b = idx[first..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Train/test split.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), train_frac, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Expert-training and stacking pools of sizes `⌈n/2⌉` and `⌊n/2⌋`.
pub fn halve_for_stacking(train: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = halving_indices(train.len(), seed)?;
    Ok((train.subset(&a), train.subset(&b)))
}

/// Row indices of the expert half (`⌈n/2⌉` rows) and the stacking half.
pub fn halving_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::TooFewPoints {
            points: n,
            blocks: 2,
        });
    }
    Ok(shuffled_halves(n, n.div_ceil(2), seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n: 50,
            grid_size: 256,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, generate(&small(4)).unwrap().y);
    }

    #[test]
    fn noiseless_single_component_lies_on_mean_curve() {
        let cfg = GeneratorConfig {
            k_true: 1,
            noise: NoiseModel::Constant { scale: 0.0 },
            ..small(1)
        };
        let ds = generate(&cfg).unwrap();
        let truth = ds.ground_truth.as_ref().unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.y[i], truth.means_at(ds.x[(i, 0)])[0]);
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let (a, b) = split_indices(1000, 0.8, 9).unwrap();
        assert_eq!((a.len(), b.len()), (800, 200));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 0.8, 9).unwrap(), (a, b));
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn halving_sizes() {
        let ds = Dataset::new(Matrix::column(&vec![0.5; 801]), vec![0.0; 801]).unwrap();
        let (a, b) = halve_for_stacking(&ds, 2).unwrap();
        assert_eq!((a.len(), b.len()), (401, 400));
        let ds = ds.subset(&(0..800).collect::<Vec<_>>());
        let (a, b) = halve_for_stacking(&ds, 2).unwrap();
        assert_eq!((a.len(), b.len()), (400, 400));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let ds = generate(&small(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.component, ds.component);
        assert_eq!(back.config, ds.config);
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(generate(&GeneratorConfig { n: 0, ..small(0) }).is_err());
        assert!(generate(&GeneratorConfig {
            lengthscale_means: 0.0,
            ..small(0)
        })
        .is_err());
    }
}
