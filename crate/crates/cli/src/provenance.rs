//! Config-hash stamping of output files and the per-run manifest.
//!
//! JSON outputs carry a top-level `config_hash`. A CSV output gets a JSON
//! sidecar `<file>.json` holding the hash and the CSV's SHA-256. Each run
//! writes `<command>.run.json` listing the resolved config, its hash and
//! the SHA-256 of every file it produced.

use std::fs;
use std::path::{Path, PathBuf};

use gpfuse::synthetic::sidecar_path;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{file_hash, value_hash, RunConfig};
use crate::CliError;

pub const MANIFEST_FORMAT: &str = "gpfuse-run/1";
const MANIFEST_SUFFIX: &str = ".run.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub config_hash: String,
    pub config: Value,
    pub outputs: Vec<OutputEntry>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Collects the files a run writes.
pub struct Run {
    config: RunConfig,
    hash: String,
    files: Vec<PathBuf>,
}

impl Run {
    pub fn start(config: RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&config.out).map_err(|e| io_err(&config.out, e))?;
        let hash = config.hash();
        Ok(Self {
            config,
            hash,
            files: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.out_path(name)
    }

    /// Writes a JSON object with `config_hash` added.
    pub fn write_json(&mut self, name: &str, value: Value) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut obj = match value {
            Value::Object(map) => map,
            other => {
                let mut map = Map::new();
                map.insert("value".into(), other);
                map
            }
        };
        obj.insert("config_hash".into(), Value::String(self.hash.clone()));
        write_json(&path, &Value::Object(obj))?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Records a CSV already on disk, stamping its sidecar (created if
    /// absent) with the config hash and the CSV digest.
    pub fn stamp_csv(&mut self, path: &Path) -> Result<(), CliError> {
        let side = sidecar_path(path);
        let mut obj = if side.exists() {
            match read_json(&side)? {
                Value::Object(map) => map,
                _ => {
                    return Err(CliError::Runtime(format!(
                        "{} is not a JSON object",
                        side.display()
                    )))
                }
            }
        } else {
            Map::new()
        };
        obj.insert("config_hash".into(), Value::String(self.hash.clone()));
        obj.insert("sha256".into(), Value::String(file_hash(path)?));
        write_json(&side, &Value::Object(obj))?;
        self.files.push(path.to_path_buf());
        self.files.push(side);
        Ok(())
    }

    /// Writes a text file whose last line records the config hash.
    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let body = format!("{text}\nconfig_hash: {}\n", self.hash);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Writes the manifest; returns its path.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let name = format!("{}{MANIFEST_SUFFIX}", self.config.command.replace(' ', "-"));
        let path = self.config.out_path(&name);
        let outputs = self
            .files
            .iter()
            .map(|f| {
                Ok(OutputEntry {
                    file: relative_name(&self.config.out, f),
                    sha256: file_hash(f)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.hash,
            config: self.config.to_value(),
            outputs,
        };
        write_json(
            &path,
            &serde_json::to_value(&manifest).expect("manifest serializes"),
        )?;
        Ok(path)
    }
}

fn relative_name(dir: &Path, file: &Path) -> String {
    file.strip_prefix(dir)
        .unwrap_or(file)
        .to_string_lossy()
        .into_owned()
}

/// Problems found in one manifest.
pub fn verify_manifest(path: &Path) -> Result<Vec<String>, CliError> {
    let manifest: Manifest = serde_json::from_value(read_json(path)?)
        .map_err(|e| io_err(path, format!("not a run manifest: {e}")))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut problems = Vec::new();
    let name = path.display();
    if manifest.format != MANIFEST_FORMAT {
        problems.push(format!("{name}: unsupported format `{}`", manifest.format));
    }
    let recomputed = value_hash(&manifest.config);
    if recomputed != manifest.config_hash {
        problems.push(format!(
            "{name}: config hashes to {recomputed}, manifest says {}",
            manifest.config_hash
        ));
    }
    for entry in &manifest.outputs {
        let file = dir.join(&entry.file);
        if !file.exists() {
            problems.push(format!("{}: missing", entry.file));
            continue;
        }
        let digest = file_hash(&file)?;
        if digest != entry.sha256 {
            problems.push(format!("{}: content changed (sha256 {digest})", entry.file));
        }
        let embedded = embedded_hash(&file)?;
        if embedded.as_deref() != Some(manifest.config_hash.as_str()) {
            problems.push(format!(
                "{}: embedded config hash {} does not match {}",
                entry.file,
                embedded.unwrap_or_else(|| "(none)".into()),
                manifest.config_hash
            ));
        }
    }
    Ok(problems)
}

fn embedded_hash(file: &Path) -> Result<Option<String>, CliError> {
    let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => Ok(read_json(file)?
            .get("config_hash")
            .and_then(Value::as_str)
            .map(str::to_owned)),
        "csv" => {
            let side = sidecar_path(file);
            if !side.exists() {
                return Ok(None);
            }
            Ok(read_json(&side)?
                .get("config_hash")
                .and_then(Value::as_str)
                .map(str::to_owned))
        }
        _ => {
            let text = fs::read_to_string(file).map_err(|e| io_err(file, e))?;
            Ok(text
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix("config_hash: "))
                .map(str::to_owned))
        }
    }
}

pub fn manifests_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(MANIFEST_SUFFIX))
        .collect();
    found.sort();
    Ok(found)
}
