use std::fs;
use std::path::{Path, PathBuf};

use gpfuse::eval::{
    prepare_split, score, sweep_experts, sweep_frequencies, Fit, Flag, SweepConfig, SweepTable,
    TestScores, RHAT_THRESHOLD,
};
use gpfuse::experts::{
    dataset_hash, predict_all, train_ensemble, EnsembleFile, ExpertEnsemble, ExpertPredictions,
};
use gpfuse::models::FusionModel;
use gpfuse::sampler::{potential_scale_reduction, split_rhat};
use gpfuse::seeds::{derive_seed, stream};
use gpfuse::synthetic::{generate, halving_indices, Dataset};
use gpfuse::{FusionModelSpec, Method};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::SweepKind;
use crate::config::RunConfig;
use crate::provenance::{manifests_in, verify_manifest, Run};
use crate::CliError;

pub const STACKING_FORMAT: &str = "gpfuse-stacking/1";

/// Experts trained on one half of a training set, plus the other half's
/// row indices for fitting the stacking weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackingFile {
    pub format: String,
    /// Hash of the full training set the halves index into.
    pub source_hash: String,
    pub expert_rows: Vec<usize>,
    pub stacking_rows: Vec<usize>,
    pub ensemble: EnsembleFile,
}

fn data_paths(config: &RunConfig) -> Result<(PathBuf, Option<PathBuf>), CliError> {
    let data = config.data.clone().ok_or_else(|| {
        CliError::Validation("missing --data <train.csv | directory from `generate`>".into())
    })?;
    if data.is_dir() {
        let test = config
            .test
            .clone()
            .or_else(|| Some(data.join("test.csv")).filter(|p| p.exists()));
        Ok((data.join("train.csv"), test))
    } else {
        Ok((data, config.test.clone()))
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "data file {} does not exist",
            path.display()
        )));
    }
    Ok(Dataset::load(path)?)
}

pub fn generate_cmd(config: RunConfig) -> Result<i32, CliError> {
    let mut run = Run::start(config)?;
    let c = run.config().clone();
    let data = generate(&c.generator)?;
    let split = prepare_split(&data, c.train_fraction, c.seed, 0)?;
    for (name, ds) in [
        ("data.csv", &data),
        ("train.csv", &split.train),
        ("test.csv", &split.test),
    ] {
        let path = run.path(name);
        ds.save(&path)?;
        run.stamp_csv(&path)?;
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (xl, xh) = range(data.x.as_slice());
    let (yl, yh) = range(&data.y);
    println!(
        "generated N = {} (train {}, test {}), x in [{xl:.4}, {xh:.4}], y in [{yl:.4}, {yh:.4}], seed {}",
        data.len(),
        split.train.len(),
        split.test.len(),
        c.generator.seed
    );
    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(0)
}

pub fn train_experts_cmd(config: RunConfig) -> Result<i32, CliError> {
    let mut run = Run::start(config)?;
    let c = run.config().clone();
    let (train_path, _) = data_paths(&c)?;
    let train = load_dataset(&train_path)?;
    let (expert_rows, stacking_rows) =
        halving_indices(train.len(), derive_seed(c.seed, &[stream::HALVE, 0]))?;
    let pool = train.subset(&expert_rows);
    let ensemble = train_ensemble(
        &pool,
        c.k,
        &c.training,
        derive_seed(c.seed, &[stream::PARTITION]),
    )?;
    for (i, e) in ensemble.experts.iter().enumerate() {
        println!(
            "expert {i}: {} points, amplitude {:.4}, lengthscale {:.4}, noise variance {:.3e}",
            ensemble.blocks[i].len(),
            e.params.amplitude,
            e.params.lengthscale,
            e.params.noise_variance
        );
    }
    let file = StackingFile {
        format: STACKING_FORMAT.into(),
        source_hash: dataset_hash(&train),
        expert_rows,
        stacking_rows,
        ensemble: ensemble.to_file(),
    };
    run.write_json(
        "experts.json",
        serde_json::to_value(&file).expect("serializes"),
    )?;
    run.finish()?;
    Ok(0)
}

/// Expert predictions at the stacking rows and (optionally) at `test`,
/// rebuilt from a saved ensemble.
struct StackingData {
    stacking_pool: Dataset,
    at_stacking: ExpertPredictions,
    ensemble: ExpertEnsemble,
}

fn load_stacking(
    config: &RunConfig,
    train: &Dataset,
    method: Method,
) -> Result<StackingData, CliError> {
    let path = config.experts.as_ref().ok_or_else(|| {
        CliError::Validation(format!(
            "{method} needs a trained expert ensemble: pass --experts <experts.json> (see `gpfuse train-experts`)"
        ))
    })?;
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read experts file {}: {e}", path.display()))
    })?;
    let file: StackingFile = serde_json::from_str(&text).map_err(|e| {
        CliError::Validation(format!("invalid experts file {}: {e}", path.display()))
    })?;
    if file.format != STACKING_FORMAT {
        return Err(CliError::Validation(format!(
            "unsupported experts format `{}`",
            file.format
        )));
    }
    if file.source_hash != dataset_hash(train) {
        return Err(CliError::Validation(format!(
            "{} was trained on a different training set",
            path.display()
        )));
    }
    if file
        .expert_rows
        .iter()
        .chain(&file.stacking_rows)
        .any(|&i| i >= train.len())
    {
        return Err(CliError::Validation(
            "experts file indexes rows outside the training set".into(),
        ));
    }
    let ensemble = ExpertEnsemble::from_file(&file.ensemble, &train.subset(&file.expert_rows))?;
    let stacking_pool = train.subset(&file.stacking_rows);
    let at_stacking = predict_all(&ensemble, &stacking_pool.x);
    Ok(StackingData {
        stacking_pool,
        at_stacking,
        ensemble,
    })
}

fn write_predictive(run: &mut Run, test: &Dataset, scores: &TestScores) -> Result<(), CliError> {
    let path = run.path("predictive.csv");
    let mut text = String::from("x,y,log_density\n");
    for i in 0..test.len() {
        text.push_str(&format!(
            "{:?},{:?},{:?}\n",
            test.x[(i, 0)],
            test.y[i],
            scores.log_densities[i]
        ));
    }
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    run.stamp_csv(&path)
}

fn scores_json(scores: &TestScores) -> Value {
    json!({
        "n_test": scores.log_densities.len(),
        "mean_nlpd": scores.mean_nlpd(),
        "lp_rhat": scores.max_rhat,
        "lost_draws": scores.lost_draws,
        "total_draws": scores.total_draws,
    })
}

fn test_inputs(
    method: Method,
    test: &Dataset,
    stacking: Option<&StackingData>,
) -> Option<ExpertPredictions> {
    method
        .uses_experts()
        .then(|| stacking.map(|s| predict_all(&s.ensemble, &test.x)))
        .flatten()
}

fn nonconverged(lp_rhat: f64) -> bool {
    lp_rhat.is_nan() || lp_rhat >= RHAT_THRESHOLD
}

pub fn fit_cmd(config: RunConfig) -> Result<i32, CliError> {
    let method = config.method.ok_or_else(|| {
        CliError::Validation("missing --method {bhs|pbhs|mogpe|pogpe|hetgp}".into())
    })?;
    let mut run = Run::start(config)?;
    let c = run.config().clone();
    let (train_path, test_path) = data_paths(&c)?;
    let train = load_dataset(&train_path)?;
    let test = test_path.as_deref().map(load_dataset).transpose()?;
    let stacking = if method.uses_experts() {
        Some(load_stacking(&c, &train, method)?)
    } else {
        if c.experts.is_some() {
            return Err(CliError::Validation(format!(
                "{method} learns its experts jointly; drop --experts"
            )));
        }
        None
    };
    let k = match &stacking {
        Some(s) => {
            let trained = s.ensemble.experts.len();
            if c.k != trained {
                return Err(CliError::Validation(format!(
                    "--k {} but the ensemble has {trained} experts",
                    c.k
                )));
            }
            trained
        }
        None => c.k,
    };
    let (fit_data, fit_experts) = match &stacking {
        Some(s) => (&s.stacking_pool, Some(s.at_stacking.to_rows())),
        None => (&train, None),
    };
    let basis_seed = derive_seed(c.seed, &[stream::BASIS]);
    let mut chain = c.chain.clone();
    chain.seed = derive_seed(c.seed, &[stream::SAMPLER]);
    let spec = FusionModelSpec::sample(method, k, c.m, fit_data.input_dim(), &c.hyper, basis_seed)?;
    let k = spec.k;
    let model = FusionModel::new(spec.clone(), &fit_data.x, &fit_data.y, fit_experts)?;
    let samples = if spec.dim() == 0 {
        gpfuse::sampler::PosteriorSamples::from_draws(
            0,
            vec![vec![Vec::new(); chain.kept_draws]; chain.chains],
        )
    } else {
        model.sample_posterior(&vec![0.0; spec.dim()], &chain)?
    };
    let fit = Fit { spec, samples };
    let samples_path = run.path("samples.csv");
    fit.save(&samples_path, &chain, basis_seed)?;
    run.stamp_csv(&samples_path)?;

    let lp_rhat = if fit.samples.dim() == 0 {
        1.0
    } else {
        split_rhat(&fit.samples.log_density_trace()).unwrap_or(f64::NAN)
    };
    let coord_rhat = potential_scale_reduction(&fit.samples)
        .map(|v| v.into_iter().fold(f64::NAN, f64::max))
        .unwrap_or(f64::NAN);
    let stats = fit.samples.stats();
    let mut diagnostics = json!({
        "method": method,
        "k": k,
        "m": c.m,
        "chains": fit.samples.chains(),
        "draws_per_chain": fit.samples.draws_per_chain(),
        "total_draws": fit.samples.total_draws(),
        "lp_rhat": lp_rhat,
        "max_coordinate_rhat": coord_rhat,
        "divergences": fit.samples.total_divergences(),
        "step_sizes": fit.samples.step_sizes(),
        "mean_accept": stats.iter().map(|s| s.mean_accept).collect::<Vec<_>>(),
        "mean_tree_depth": stats.iter().map(|s| s.mean_tree_depth).collect::<Vec<_>>(),
        "nonconverged": nonconverged(lp_rhat),
    });
    println!(
        "{method} K={k} M={}: {} draws, log-density R-hat {lp_rhat:.3}, {} divergences",
        c.m,
        fit.samples.total_draws(),
        fit.samples.total_divergences()
    );
    if let Some(test) = &test {
        let at_test = test_inputs(method, test, stacking.as_ref());
        let scores = score(&fit, test, at_test.as_ref())?;
        println!(
            "mean NLPD on {} test points: {:?}",
            test.len(),
            scores.mean_nlpd()
        );
        diagnostics["test"] = scores_json(&scores);
        write_predictive(&mut run, test, &scores)?;
    }
    run.write_json("diagnostics.json", diagnostics)?;
    run.finish()?;
    if c.strict && nonconverged(lp_rhat) {
        eprintln!("error: log-density R-hat {lp_rhat:.3} >= {RHAT_THRESHOLD}");
        return Ok(3);
    }
    Ok(0)
}

pub fn evaluate_cmd(config: RunConfig) -> Result<i32, CliError> {
    let mut run = Run::start(config)?;
    let c = run.config().clone();
    let samples_path = c.samples.clone().ok_or_else(|| {
        CliError::Validation("missing --samples <samples.csv> (written by `gpfuse fit`)".into())
    })?;
    if !samples_path.exists() {
        return Err(CliError::Validation(format!(
            "samples file {} does not exist",
            samples_path.display()
        )));
    }
    let (fit, _) = Fit::load(&samples_path)?;
    let method = fit.spec.method;
    let (test_path, train) = match &c.data {
        Some(_) => {
            let (train_path, test_path) = data_paths(&c)?;
            (test_path, Some(load_dataset(&train_path)?))
        }
        None => (c.test.clone(), None),
    };
    let test_path =
        test_path.ok_or_else(|| CliError::Validation("missing --test <test.csv>".into()))?;
    let test = load_dataset(&test_path)?;
    let stacking = if method.uses_experts() {
        let train = train.as_ref().ok_or_else(|| {
            CliError::Validation(format!(
                "{method} needs --data <train.csv> and --experts to rebuild its experts"
            ))
        })?;
        Some(load_stacking(&c, train, method)?)
    } else {
        None
    };
    let at_test = test_inputs(method, &test, stacking.as_ref());
    let scores = score(&fit, &test, at_test.as_ref())?;
    println!(
        "{method}: mean NLPD on {} test points: {:?}",
        test.len(),
        scores.mean_nlpd()
    );
    write_predictive(&mut run, &test, &scores)?;
    let mut summary = scores_json(&scores);
    summary["method"] = json!(method);
    summary["samples"] = json!(samples_path);
    run.write_json("evaluation.json", summary)?;
    run.finish()?;
    if c.strict && nonconverged(scores.max_rhat) {
        eprintln!(
            "error: log-density R-hat {:.3} >= {RHAT_THRESHOLD}",
            scores.max_rhat
        );
        return Ok(3);
    }
    Ok(0)
}

pub fn sweep_cmd(config: RunConfig, kind: SweepKind) -> Result<i32, CliError> {
    let mut run = Run::start(config)?;
    let c = run.config().clone();
    let sweep = SweepConfig {
        seed: c.seed,
        generator: c.generator.clone(),
        train_fraction: c.train_fraction,
        splits: c.splits,
        regenerate_data: c.regenerate_data,
        methods: match c.method {
            Some(m) => vec![m],
            None => Method::ALL.to_vec(),
        },
        chain: c.chain.clone(),
        hyper: c.hyper,
        training: c.training.clone(),
        timeout_s: c.timeout_s,
        workers: c.workers,
    };
    let table = match kind {
        SweepKind::Experts => sweep_experts(&sweep, &c.k_list, c.m)?,
        SweepKind::Frequencies => sweep_frequencies(&sweep, &c.m_list, c.k)?,
    };
    write_sweep(&mut run, &table)?;
    let summary = table.summary();
    print!("{summary}");
    run.write_text("summary.txt", &summary)?;
    run.finish()?;

    let failed = table
        .results
        .iter()
        .filter(|r| {
            r.flags
                .iter()
                .any(|f| matches!(f, Flag::Failed | Flag::Timeout))
        })
        .count();
    let nonconv = table
        .results
        .iter()
        .filter(|r| r.flags.contains(&Flag::Nonconverged))
        .count();
    if failed > 0 {
        eprintln!(
            "error: {failed} of {} cells failed or timed out",
            table.results.len()
        );
        return Ok(2);
    }
    if nonconv > 0 {
        eprintln!(
            "warning: {nonconv} of {} cells did not converge",
            table.results.len()
        );
        if c.strict {
            return Ok(3);
        }
    }
    Ok(0)
}

fn write_sweep(run: &mut Run, table: &SweepTable) -> Result<(), CliError> {
    let csv = run.path("sweep.csv");
    let aggregate = run.path("sweep_aggregate.csv");
    table.save(&csv, &aggregate)?;
    run.stamp_csv(&csv)?;
    run.stamp_csv(&aggregate)
}

pub fn verify_cmd(config: RunConfig) -> Result<i32, CliError> {
    let manifests = manifests_in(&config.out)?;
    if manifests.is_empty() {
        return Err(CliError::Validation(format!(
            "no run manifests in {}",
            config.out.display()
        )));
    }
    let mut bad = 0;
    for m in &manifests {
        let problems = verify_manifest(m)?;
        if problems.is_empty() {
            println!("ok {}", m.display());
        } else {
            bad += 1;
            println!("FAILED {}", m.display());
            for p in problems {
                println!("  {p}");
            }
        }
    }
    Ok(if bad == 0 { 0 } else { 1 })
}
