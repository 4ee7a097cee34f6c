//! NLPD scoring, single fits and the expert-count / frequency-count sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{
    predict_all, train_ensemble, ExpertEnsemble, ExpertPredictions, TrainingConfig,
};
use crate::models::{
    per_draw_log_densities, FusionModel, FusionModelSpec, LatentHyperparameters, Method,
    ParameterLayout, MAX_DRAW_LOSS,
};
use crate::sampler::{mean_of_exp_log, split_rhat, ChainConfig, ChainStats, PosteriorSamples};
use crate::seeds::{derive_seed, stream};
use crate::synthetic::{
    generate, halve_for_stacking, sidecar_path, split, Dataset, GeneratorConfig,
};

/// R̂ at or above this marks a run as not converged.
pub const RHAT_THRESHOLD: f64 = 1.1;

/// Mean negative log predictive density.
pub fn nlpd(log_densities: &[f64]) -> f64 {
    -log_densities.iter().sum::<f64>() / log_densities.len() as f64
}

/// Per-test-point predictive scores of a fitted model.
#[derive(Clone, Debug, PartialEq)]
pub struct TestScores {
    pub log_densities: Vec<f64>,
    /// Split-R̂ of the log-density trace.
    pub max_rhat: f64,
    pub lost_draws: usize,
    pub total_draws: usize,
}

impl TestScores {
    pub fn mean_nlpd(&self) -> f64 {
        nlpd(&self.log_densities)
    }

    pub fn draw_loss_fraction(&self) -> f64 {
        if self.total_draws == 0 {
            0.0
        } else {
            self.lost_draws as f64 / self.total_draws as f64
        }
    }
}

/// A fitted fusion model.
#[derive(Clone, Debug)]
pub struct Fit {
    pub spec: FusionModelSpec<f64>,
    pub samples: PosteriorSamples<f64>,
}

pub const SAMPLES_FORMAT: &str = "gpfuse-samples/1";

/// Sidecar describing a samples CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplesMeta {
    pub format: String,
    pub layout: ParameterLayout,
    pub spec: FusionModelSpec<f64>,
    pub chain: ChainConfig,
    pub basis_seed: u64,
    pub stats: Vec<ChainStats>,
    pub lp_rhat: Option<f64>,
    pub divergences: usize,
}

impl Fit {
    /// Writes one row per draw (`chain,draw,lp__,<parameters>`) and a JSON
    /// sidecar at `<path>.json`.
    pub fn save(&self, path: &Path, chain: &ChainConfig, basis_seed: u64) -> Result<()> {
        let layout = self.spec.layout();
        let mut header = vec!["chain".to_string(), "draw".into(), "lp__".into()];
        for slice in &layout.slices {
            header.extend((0..slice.len).map(|i| format!("{}[{i}]", slice.name)));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&header)?;
        let s = &self.samples;
        for c in 0..s.chains() {
            for d in 0..s.draws_per_chain() {
                let mut rec = vec![
                    c.to_string(),
                    d.to_string(),
                    format!("{:?}", s.log_density(c, d)),
                ];
                rec.extend(s.draw(c, d).iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        let lp = s.log_density_trace();
        let meta = SamplesMeta {
            format: SAMPLES_FORMAT.into(),
            layout,
            spec: self.spec.clone(),
            chain: chain.clone(),
            basis_seed,
            stats: s.stats().to_vec(),
            lp_rhat: split_rhat(&lp).ok().filter(|r| r.is_finite()),
            divergences: s.total_divergences(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Fit, SamplesMeta)> {
        let meta: SamplesMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if meta.format != SAMPLES_FORMAT {
            return Err(Error::Format(format!(
                "unsupported samples format `{}`",
                meta.format
            )));
        }
        let dim = meta.spec.dim();
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.len() != dim + 3 {
            return Err(Error::Format(format!(
                "samples CSV must have {} columns",
                dim + 3
            )));
        }
        let mut chains: Vec<(Vec<f64>, Vec<f64>)> =
            vec![(Vec::new(), Vec::new()); meta.stats.len()];
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number `{}`", &rec[i])))
            };
            let c: usize = rec[0]
                .parse()
                .map_err(|_| Error::Format("bad chain index".into()))?;
            let slot = chains
                .get_mut(c)
                .ok_or_else(|| Error::Format(format!("chain {c} not described by the sidecar")))?;
            slot.1.push(num(2)?);
            for i in 0..dim {
                slot.0.push(num(3 + i)?);
            }
        }
        let packed = chains
            .into_iter()
            .zip(meta.stats.iter().cloned())
            .map(|((d, lp), st)| (d, lp, st))
            .collect::<Vec<_>>();
        if packed.iter().any(|c| c.1.len() != packed[0].1.len()) {
            return Err(Error::Format("chains have different lengths".into()));
        }
        let samples = PosteriorSamples::from_chains(dim, packed);
        Ok((
            Fit {
                spec: meta.spec.clone(),
                samples,
            },
            meta,
        ))
    }
}

/// Samples the posterior of `method` on `(x, y)`.
///
/// `experts` holds the expert predictions at the training inputs and is
/// required exactly for the stacking methods.
#[allow(clippy::too_many_arguments)]
pub fn fit_method(
    method: Method,
    k: usize,
    m: usize,
    data: &Dataset,
    experts: Option<&ExpertPredictions>,
    hyper: &LatentHyperparameters,
    chain: &ChainConfig,
    basis_seed: u64,
) -> Result<Fit> {
    let spec = FusionModelSpec::sample(method, k, m, data.input_dim(), hyper, basis_seed)?;
    let model = FusionModel::new(
        spec.clone(),
        &data.x,
        &data.y,
        experts.map(ExpertPredictions::to_rows),
    )?;
    let dim = spec.dim();
    let samples = if dim == 0 {
        chain.validate()?;
        let draws = vec![vec![Vec::new(); chain.kept_draws]; chain.chains];
        PosteriorSamples::from_draws(0, draws)
    } else {
        model.sample_posterior(&vec![0.0; dim], chain)?
    };
    Ok(Fit { spec, samples })
}

/// Scores `fit` on `test`; `experts` are the expert predictions at the test
/// inputs for stacking methods.
pub fn score(fit: &Fit, test: &Dataset, experts: Option<&ExpertPredictions>) -> Result<TestScores> {
    let n = test.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    let mut log_densities = Vec::with_capacity(n);
    let mut lost = 0;
    for i in 0..n {
        let row = experts.map(|e| e.row(i));
        let (terms, l) = per_draw_log_densities(
            &fit.spec,
            &fit.samples,
            test.x.row(i),
            test.y[i],
            row.as_deref(),
        )?;
        lost += l;
        log_densities.push(mean_of_exp_log(&terms));
    }
    // the log-density trace is invariant to relabelling mixture components
    let max_rhat = if fit.samples.dim() == 0 {
        1.0
    } else {
        rhat_or_nan(&fit.samples.log_density_trace())
    };
    let total = n * fit.samples.total_draws();
    if lost as f64 > MAX_DRAW_LOSS * total as f64 {
        return Err(Error::DrawLoss { lost, total });
    }
    Ok(TestScores {
        log_densities,
        max_rhat,
        lost_draws: lost,
        total_draws: total,
    })
}

fn rhat_or_nan(trace: &[Vec<f64>]) -> f64 {
    if trace.iter().flatten().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    split_rhat(trace).unwrap_or(f64::NAN)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Max R̂ at or above the threshold.
    Nonconverged,
    Timeout,
    Failed,
    /// A K-independent run replicated across K rows.
    Constant,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::Nonconverged => "nonconverged",
            Flag::Timeout => "timeout",
            Flag::Failed => "failed",
            Flag::Constant => "constant",
        }
    }

    /// Flags that exclude a run from summary statistics.
    pub fn excludes(self) -> bool {
        !matches!(self, Flag::Constant)
    }
}

impl std::str::FromStr for Flag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonconverged" => Ok(Flag::Nonconverged),
            "timeout" => Ok(Flag::Timeout),
            "failed" => Ok(Flag::Failed),
            "constant" => Ok(Flag::Constant),
            _ => Err(Error::Format(format!("unknown flag `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub k: usize,
    pub m: usize,
    /// Split index within the sweep.
    pub seed: u64,
    pub mean_nlpd: f64,
    pub draw_loss_fraction: f64,
    pub wall_time_s: f64,
    pub max_rhat: f64,
    pub divergences: usize,
    pub flags: Vec<Flag>,
    /// Error message of a failed run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunResult {
    pub fn key(&self) -> (Method, usize, usize, u64) {
        (self.method, self.k, self.m, self.seed)
    }

    pub fn is_excluded(&self) -> bool {
        self.flags.iter().any(|f| f.excludes())
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        let same_f = |a: f64, b: f64| a.to_bits() == b.to_bits();
        self.key() == other.key()
            && same_f(self.mean_nlpd, other.mean_nlpd)
            && same_f(self.draw_loss_fraction, other.draw_loss_fraction)
            && same_f(self.max_rhat, other.max_rhat)
            && self.divergences == other.divergences
            && self.flags == other.flags
            && self.error == other.error
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    K,
    M,
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::K => "K",
            SweepVariable::M => "M",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub variable: SweepVariable,
    pub results: Vec<RunResult>,
}

pub const SWEEP_CSV_HEADER: &str =
    "method,K,M,seed,mean_nlpd,max_rhat,divergences,wall_time_s,flags";

impl SweepTable {
    pub fn variable_value(&self, r: &RunResult) -> usize {
        match self.variable {
            SweepVariable::K => r.k,
            SweepVariable::M => r.m,
        }
    }

    pub fn get(&self, method: Method, k: usize, m: usize, seed: u64) -> Option<&RunResult> {
        self.results
            .iter()
            .find(|r| r.key() == (method, k, m, seed))
    }

    /// `(variable value, mean NLPD)` of one method and split, in increasing
    /// order of the sweep variable.
    pub fn curve(&self, method: Method, seed: u64) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .results
            .iter()
            .filter(|r| r.method == method && r.seed == seed)
            .map(|r| (self.variable_value(r), r.mean_nlpd))
            .collect();
        out.sort_by_key(|p| p.0);
        out
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &SweepTable) -> bool {
        self.variable == other.variable
            && self.results.len() == other.results.len()
            && self
                .results
                .iter()
                .zip(&other.results)
                .all(|(a, b)| a.same_outcome(b))
    }

    pub fn flagged_count(&self) -> usize {
        self.results.iter().filter(|r| r.is_excluded()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.results {
            let flags: Vec<&str> = r.flags.iter().map(|f| f.name()).collect();
            out.push_str(&format!(
                "{},{},{},{},{:?},{:?},{},{:?},{}\n",
                r.method,
                r.k,
                r.m,
                r.seed,
                r.mean_nlpd,
                r.max_rhat,
                r.divergences,
                r.wall_time_s,
                flags.join(";")
            ));
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output. Columns absent from the CSV
    /// (draw loss, error text) come back empty.
    pub fn from_csv(variable: SweepVariable, text: &str) -> Result<SweepTable> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != SWEEP_CSV_HEADER {
            return Err(Error::Format(format!(
                "unexpected sweep header `{}`",
                header.join(",")
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("`{s}`: {e}")))
        };
        let u = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|e| Error::Format(format!("`{s}`: {e}")))
        };
        let mut results = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let flags = rec[8]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<Flag>>>()?;
            results.push(RunResult {
                method: rec[0].parse()?,
                k: u(&rec[1])? as usize,
                m: u(&rec[2])? as usize,
                seed: u(&rec[3])?,
                mean_nlpd: f(&rec[4])?,
                max_rhat: f(&rec[5])?,
                divergences: u(&rec[6])? as usize,
                wall_time_s: f(&rec[7])?,
                flags,
                draw_loss_fraction: 0.0,
                error: None,
            });
        }
        Ok(SweepTable { variable, results })
    }

    /// Box statistics per (method, sweep value) over non-excluded runs.
    pub fn aggregate(&self) -> Vec<BoxStats> {
        let mut groups: BTreeMap<(Method, usize), (Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.results {
            let entry = groups
                .entry((r.method, self.variable_value(r)))
                .or_default();
            if r.is_excluded() || !r.mean_nlpd.is_finite() {
                entry.1 += 1;
            } else {
                entry.0.push(r.mean_nlpd);
            }
        }
        groups
            .into_iter()
            .map(|((method, value), (values, excluded))| {
                BoxStats::new(method, value, &values, excluded)
            })
            .collect()
    }

    /// Median NLPD of one method at one sweep value, if any run counts.
    pub fn median(&self, method: Method, value: usize) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|b| b.method == method && b.value == value && b.count > 0)
            .map(|b| b.median)
    }

    /// Methods ordered by the median over all their counted runs.
    pub fn ranking(&self) -> Vec<(Method, f64)> {
        let mut per: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
        for r in self
            .results
            .iter()
            .filter(|r| !r.is_excluded() && r.mean_nlpd.is_finite())
        {
            per.entry(r.method).or_default().push(r.mean_nlpd);
        }
        let mut out: Vec<(Method, f64)> = per
            .into_iter()
            .map(|(m, mut v)| {
                v.sort_by(f64::total_cmp);
                (m, quantile_sorted(&v, 0.5))
            })
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1));
        out
    }

    pub fn save(&self, csv_path: &Path, aggregate_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv())?;
        fs::write(
            aggregate_path,
            aggregate_csv(self.variable, &self.aggregate()),
        )?;
        Ok(())
    }

    /// Human-readable ranking by median NLPD.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let values: Vec<usize> = {
            let mut v: Vec<usize> = self
                .results
                .iter()
                .map(|r| self.variable_value(r))
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        out.push_str(&format!(
            "{} runs, {} flagged\n",
            self.results.len(),
            self.flagged_count()
        ));
        out.push_str("overall ranking by median NLPD (lower is better):\n");
        for (i, (m, v)) in self.ranking().iter().enumerate() {
            out.push_str(&format!("  {}. {:<6} {:.4}\n", i + 1, m.name(), v));
        }
        let stats = self.aggregate();
        for value in values {
            out.push_str(&format!("{} = {value}:", self.variable));
            let mut row: Vec<&BoxStats> = stats
                .iter()
                .filter(|b| b.value == value && b.count > 0)
                .collect();
            row.sort_by(|a, b| a.median.total_cmp(&b.median));
            for b in row {
                out.push_str(&format!("  {} {:.4}", b.method, b.median));
            }
            out.push('\n');
        }
        out
    }
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub method: Method,
    pub value: usize,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub excluded: usize,
}

impl BoxStats {
    pub fn new(method: Method, value: usize, values: &[f64], excluded: usize) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            method,
            value,
            count: v.len(),
            median: quantile_sorted(&v, 0.5),
            q1: quantile_sorted(&v, 0.25),
            q3: quantile_sorted(&v, 0.75),
            min: v.first().copied().unwrap_or(f64::NAN),
            max: v.last().copied().unwrap_or(f64::NAN),
            excluded,
        }
    }
}

pub fn aggregate_csv(variable: SweepVariable, stats: &[BoxStats]) -> String {
    let mut out = format!("method,{variable},count,median,q1,q3,min,max,excluded\n");
    for b in stats {
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{}\n",
            b.method, b.value, b.count, b.median, b.q1, b.q3, b.min, b.max, b.excluded
        ));
    }
    out
}

/// Everything a sweep needs besides the sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub train_fraction: f64,
    pub splits: usize,
    /// Draw a fresh dataset per split instead of re-splitting one dataset.
    pub regenerate_data: bool,
    pub methods: Vec<Method>,
    pub chain: ChainConfig,
    pub hyper: LatentHyperparameters,
    pub training: TrainingConfig,
    pub timeout_s: f64,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig::default(),
            train_fraction: 0.8,
            splits: 5,
            regenerate_data: false,
            methods: Method::ALL.to_vec(),
            chain: ChainConfig {
                chains: 2,
                warmup_draws: 250,
                kept_draws: 250,
                init_jitter: 0.1,
                ..ChainConfig::default()
            },
            hyper: LatentHyperparameters::default(),
            training: TrainingConfig::default(),
            timeout_s: 1200.0,
            workers: 1,
        }
    }
}

/// Train/test data of one split, with the stacking halves.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Dataset,
    pub test: Dataset,
    pub expert_pool: Dataset,
    pub stacking_pool: Dataset,
}

pub fn prepare_split(
    dataset: &Dataset,
    train_fraction: f64,
    root: u64,
    split_index: u64,
) -> Result<SplitData> {
    let (train, test) = split(
        dataset,
        train_fraction,
        derive_seed(root, &[stream::SPLIT, split_index]),
    )?;
    let (expert_pool, stacking_pool) =
        halve_for_stacking(&train, derive_seed(root, &[stream::HALVE, split_index]))?;
    Ok(SplitData {
        train,
        test,
        expert_pool,
        stacking_pool,
    })
}

/// Expert predictions at the stacking pool and at the test set.
#[derive(Clone, Debug)]
pub struct StackingInputs {
    pub ensemble: ExpertEnsemble,
    pub at_stacking: ExpertPredictions,
    pub at_test: ExpertPredictions,
}

pub fn prepare_experts(
    data: &SplitData,
    k: usize,
    training: &TrainingConfig,
    seed: u64,
) -> Result<StackingInputs> {
    let ensemble = train_ensemble(&data.expert_pool, k, training, seed)?;
    let at_stacking = predict_all(&ensemble, &data.stacking_pool.x);
    let at_test = predict_all(&ensemble, &data.test.x);
    Ok(StackingInputs {
        ensemble,
        at_stacking,
        at_test,
    })
}

fn method_label(method: Method) -> u64 {
    Method::ALL.iter().position(|&m| m == method).unwrap_or(0) as u64
}

/// Fits and scores one (method, K, M, split) cell; never fails, errors are
/// recorded as flags.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    config: &SweepConfig,
    data: &SplitData,
    stacking: Option<&StackingInputs>,
    method: Method,
    k: usize,
    m: usize,
    split_index: u64,
) -> RunResult {
    let start = Instant::now();
    let mut chain = config.chain.clone();
    let cell = [method_label(method), k as u64, m as u64, split_index];
    chain.seed = derive_seed(
        config.seed,
        &[stream::SAMPLER, cell[0], cell[1], cell[2], cell[3]],
    );
    chain.deadline =
        (config.timeout_s > 0.0).then(|| start + Duration::from_secs_f64(config.timeout_s));
    let basis_seed = derive_seed(
        config.seed,
        &[stream::BASIS, cell[0], cell[1], cell[2], cell[3]],
    );
    let outcome = (|| -> Result<(TestScores, usize)> {
        let (fit, scores) = if method.uses_experts() {
            let s = stacking.ok_or_else(|| Error::Missing("expert ensemble".into()))?;
            let fit = fit_method(
                method,
                k,
                m,
                &data.stacking_pool,
                Some(&s.at_stacking),
                &config.hyper,
                &chain,
                basis_seed,
            )?;
            let scores = score(&fit, &data.test, Some(&s.at_test))?;
            (fit, scores)
        } else {
            let fit = fit_method(
                method,
                k,
                m,
                &data.train,
                None,
                &config.hyper,
                &chain,
                basis_seed,
            )?;
            let scores = score(&fit, &data.test, None)?;
            (fit, scores)
        };
        Ok((scores, fit.samples.total_divergences()))
    })();
    let wall_time_s = start.elapsed().as_secs_f64();
    let mut result = RunResult {
        method,
        k,
        m,
        seed: split_index,
        mean_nlpd: f64::NAN,
        draw_loss_fraction: 0.0,
        wall_time_s,
        max_rhat: f64::NAN,
        divergences: 0,
        flags: Vec::new(),
        error: None,
    };
    match outcome {
        Ok((scores, divergences)) => {
            result.mean_nlpd = scores.mean_nlpd();
            result.draw_loss_fraction = scores.draw_loss_fraction();
            result.max_rhat = scores.max_rhat;
            result.divergences = divergences;
            if !(scores.max_rhat < RHAT_THRESHOLD) {
                result.flags.push(Flag::Nonconverged);
            }
            if !result.mean_nlpd.is_finite() {
                result.flags.push(Flag::Failed);
            }
        }
        Err(Error::Timeout) => {
            result.flags.push(Flag::Timeout);
            result.error = Some(Error::Timeout.to_string());
        }
        Err(e) => {
            result.flags.push(Flag::Failed);
            result.error = Some(e.to_string());
        }
    }
    result
}

/// Runs every method over `(K, M)` grid points and `config.splits` splits.
fn run_sweep(
    config: &SweepConfig,
    variable: SweepVariable,
    grid: &[(usize, usize)],
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    if config.splits == 0 {
        return Err(Error::InvalidParameter(
            "sweep needs at least one split".into(),
        ));
    }
    if config.methods.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs at least one method".into(),
        ));
    }
    config.chain.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| {
        let base = if config.regenerate_data {
            None
        } else {
            Some(generate(&config.generator)?)
        };
        let splits = (0..config.splits)
            .into_par_iter()
            .map(|s| {
                let owned;
                let ds = match &base {
                    Some(d) => d,
                    None => {
                        let gen = GeneratorConfig {
                            seed: derive_seed(config.generator.seed, &[stream::DATA, s as u64]),
                            ..config.generator.clone()
                        };
                        owned = generate(&gen)?;
                        &owned
                    }
                };
                prepare_split(ds, config.train_fraction, config.seed, s as u64)
            })
            .collect::<Result<Vec<_>>>()?;

        let stacking_needed = config.methods.iter().any(|m| m.uses_experts());
        let mut k_values: Vec<usize> = grid.iter().map(|g| g.0).collect();
        k_values.sort_unstable();
        k_values.dedup();
        let expert_keys: Vec<(usize, usize)> = if stacking_needed {
            (0..config.splits)
                .flat_map(|s| k_values.iter().map(move |&k| (s, k)))
                .collect()
        } else {
            Vec::new()
        };
        let ensembles: BTreeMap<(usize, usize), std::result::Result<StackingInputs, String>> =
            expert_keys
                .par_iter()
                .map(|&(s, k)| {
                    let seed = derive_seed(config.seed, &[stream::PARTITION, s as u64, k as u64]);
                    (
                        (s, k),
                        prepare_experts(&splits[s], k, &config.training, seed)
                            .map_err(|e| e.to_string()),
                    )
                })
                .collect();

        // the het-RFF-GP does not depend on K; in a K sweep it runs once per split
        let het_k = grid[0].0;
        let mut jobs = Vec::new();
        for &method in &config.methods {
            for &(k, m) in grid {
                if method == Method::Hetgp && variable == SweepVariable::K && k != het_k {
                    continue;
                }
                for split in 0..config.splits {
                    jobs.push((method, k, m, split));
                }
            }
        }
        let done: Vec<RunResult> = jobs
            .par_iter()
            .map(|&(method, k, m, split)| {
                let data = &splits[split];
                let stacking = ensembles.get(&(split, k));
                match stacking {
                    Some(Err(msg)) if method.uses_experts() => RunResult {
                        method,
                        k,
                        m,
                        seed: split as u64,
                        mean_nlpd: f64::NAN,
                        draw_loss_fraction: 0.0,
                        wall_time_s: 0.0,
                        max_rhat: f64::NAN,
                        divergences: 0,
                        flags: vec![Flag::Failed],
                        error: Some(msg.clone()),
                    },
                    _ => {
                        let hk = if method == Method::Hetgp { 1 } else { k };
                        let mut r = run_cell(
                            config,
                            data,
                            stacking.and_then(|s| s.as_ref().ok()),
                            method,
                            hk,
                            m,
                            split as u64,
                        );
                        r.k = k;
                        r
                    }
                }
            })
            .collect();

        let mut results = Vec::new();
        for r in done {
            if r.method == Method::Hetgp && variable == SweepVariable::K {
                for &(k, m) in grid {
                    if m == r.m {
                        let mut copy = r.clone();
                        copy.k = k;
                        copy.flags.push(Flag::Constant);
                        results.push(copy);
                    }
                }
            } else {
                results.push(r);
            }
        }
        results.sort_by_key(|r| r.key());
        Ok(SweepTable { variable, results })
    })
}

/// Varies the number of experts at a fixed number of frequencies.
pub fn sweep_experts(config: &SweepConfig, k_values: &[usize], m: usize) -> Result<SweepTable> {
    let grid: Vec<(usize, usize)> = k_values.iter().map(|&k| (k, m)).collect();
    run_sweep(config, SweepVariable::K, &grid)
}

/// Varies the number of frequencies at a fixed number of experts.
pub fn sweep_frequencies(config: &SweepConfig, m_values: &[usize], k: usize) -> Result<SweepTable> {
    let grid: Vec<(usize, usize)> = m_values.iter().map(|&m| (k, m)).collect();
    run_sweep(config, SweepVariable::M, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nlpd_examples() {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((nlpd(&[-half_ln_2pi; 4]) - 0.918938533204673).abs() < 1e-12);
        let at_one = crate::scalar::normal_log_pdf(1.0, 0.0, 1.0);
        assert!((nlpd(&[at_one; 3]) - 1.418938533204673).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.25), 2.0);
        assert_eq!(quantile_sorted(&v, 0.75), 4.0);
        assert_eq!(quantile_sorted(&[1.0, 2.0], 0.5), 1.5);
    }

    fn result(method: Method, k: usize, seed: u64, nlpd: f64) -> RunResult {
        RunResult {
            method,
            k,
            m: 30,
            seed,
            mean_nlpd: nlpd,
            draw_loss_fraction: 0.0,
            wall_time_s: 1.25,
            max_rhat: 1.01,
            divergences: 2,
            flags: Vec::new(),
            error: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut r = result(Method::Pogpe, 3, 4, -0.123456789012345);
        r.flags = vec![Flag::Nonconverged, Flag::Constant];
        let table = SweepTable {
            variable: SweepVariable::K,
            results: vec![result(Method::Bhs, 2, 0, 0.1 + 0.2), r],
        };
        let back = SweepTable::from_csv(SweepVariable::K, &table.to_csv()).unwrap();
        assert_eq!(back, table);
        let json: SweepTable =
            serde_json::from_str(&serde_json::to_string(&table).unwrap()).unwrap();
        assert_eq!(json, table);
    }

    #[test]
    fn aggregation_excludes_flagged_runs() {
        let mut results: Vec<RunResult> = (0..5)
            .map(|s| result(Method::Bhs, 2, s, s as f64))
            .collect();
        results[4].flags.push(Flag::Nonconverged);
        let table = SweepTable {
            variable: SweepVariable::K,
            results,
        };
        let b = &table.aggregate()[0];
        assert_eq!((b.count, b.excluded), (4, 1));
        assert_eq!(
            (b.min, b.q1, b.median, b.q3, b.max),
            (0.0, 0.75, 1.5, 2.25, 3.0)
        );
    }

    #[test]
    fn samples_file_round_trip() {
        let gen = GeneratorConfig {
            n: 40,
            grid_size: 64,
            ..GeneratorConfig::default()
        };
        let data = generate(&gen).unwrap();
        let chain = ChainConfig {
            chains: 2,
            warmup_draws: 20,
            kept_draws: 10,
            seed: 3,
            ..ChainConfig::default()
        };
        let fit = fit_method(
            Method::Mogpe,
            2,
            3,
            &data,
            None,
            &LatentHyperparameters::default(),
            &chain,
            9,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        fit.save(&path, &chain, 9).unwrap();
        let (back, meta) = Fit::load(&path).unwrap();
        assert_eq!(back.spec, fit.spec);
        assert_eq!(back.samples, fit.samples);
        assert_eq!(meta.basis_seed, 9);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("chain,draw,lp__,mean_0[0]"));
    }
}
