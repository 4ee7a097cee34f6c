//! Resolved run configuration: defaults, then an optional JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use gpfuse::experts::TrainingConfig;
use gpfuse::models::LatentHyperparameters;
use gpfuse::synthetic::GeneratorConfig;
use gpfuse::{ChainConfig, Method};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Flags;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// Root seed; every stream (data, splits, bases, chains) derives from it.
    pub seed: u64,
    pub method: Option<Method>,
    pub k: usize,
    pub m: usize,
    pub k_list: Vec<usize>,
    pub m_list: Vec<usize>,
    pub splits: usize,
    pub train_fraction: f64,
    pub regenerate_data: bool,
    pub generator: GeneratorConfig,
    pub training: TrainingConfig,
    pub hyper: LatentHyperparameters,
    pub chain: ChainConfig,
    pub timeout_s: f64,
    pub workers: usize,
    pub strict: bool,
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub experts: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            method: None,
            k: 2,
            m: 30,
            k_list: vec![2, 3, 4, 5],
            m_list: vec![10, 20, 30, 40, 50],
            splits: 5,
            train_fraction: 0.8,
            regenerate_data: false,
            generator: GeneratorConfig::default(),
            training: TrainingConfig::default(),
            hyper: LatentHyperparameters::default(),
            chain: ChainConfig {
                init_jitter: 0.1,
                ..ChainConfig::default()
            },
            timeout_s: 1200.0,
            workers: 1,
            strict: false,
            data: None,
            test: None,
            experts: None,
            samples: None,
            out: PathBuf::from("."),
        }
    }
}

fn single(name: &str, values: &[usize]) -> Result<Option<usize>, CliError> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(CliError::Validation(format!(
            "--{name} takes a single value here"
        ))),
    }
}

impl RunConfig {
    /// `--config` file (if any) with the flags applied on top. `list_k`
    /// and `list_m` say whether `--k`/`--m` are lists for this command.
    pub fn resolve(
        command: &str,
        flags: &Flags,
        list_k: bool,
        list_m: bool,
    ) -> Result<Self, CliError> {
        let mut c = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Validation(format!("invalid config {}: {e}", path.display()))
                })?
            }
            None => RunConfig::default(),
        };
        c.command = command.to_string();
        if let Some(seed) = flags.seed {
            c.seed = seed;
            c.generator.seed = seed;
        }
        if let Some(method) = flags.method {
            c.method = Some(method);
        }
        if list_k {
            if !flags.k.is_empty() {
                c.k_list = flags.k.clone();
            }
        } else if let Some(k) = single("k", &flags.k)? {
            c.k = k;
        }
        if list_m {
            if !flags.m.is_empty() {
                c.m_list = flags.m.clone();
            }
        } else if let Some(m) = single("m", &flags.m)? {
            c.m = m;
        }
        if let Some(n) = flags.n {
            c.generator.n = n;
        }
        if let Some(v) = flags.chains {
            c.chain.chains = v;
        }
        if let Some(v) = flags.draws {
            c.chain.kept_draws = v;
        }
        if let Some(v) = flags.warmup {
            c.chain.warmup_draws = v;
        }
        if let Some(v) = flags.workers {
            c.workers = v;
        }
        if let Some(v) = flags.seeds {
            c.splits = v;
        }
        if let Some(v) = flags.timeout {
            c.timeout_s = v;
        }
        if flags.strict {
            c.strict = true;
        }
        for (slot, flag) in [
            (&mut c.data, &flags.data),
            (&mut c.test, &flags.test),
            (&mut c.experts, &flags.experts),
            (&mut c.samples, &flags.samples),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        if let Some(out) = &flags.out {
            c.out = out.clone();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.k == 0 || self.m == 0 {
            return bad("--k and --m must be at least 1".into());
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return bad("the K list must be non-empty with entries >= 1".into());
        }
        if self.m_list.is_empty() || self.m_list.contains(&0) {
            return bad("the M list must be non-empty with entries >= 1".into());
        }
        if self.splits == 0 {
            return bad("--seeds must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("--workers must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        self.generator
            .validate()
            .map_err(|e| CliError::Validation(format!("generator: {e}")))?;
        self.chain
            .validate()
            .map_err(|e| CliError::Validation(format!("sampler: {e}")))?;
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        value_hash(&self.to_value())
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn value_hash(value: &serde_json::Value) -> String {
    sha256_hex(
        serde_json::to_string(value)
            .expect("value serializes")
            .as_bytes(),
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}
