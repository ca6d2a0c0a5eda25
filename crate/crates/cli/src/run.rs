//! Run directories: lock file, manifest and CSV artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Version of every CSV schema and of the manifest layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const STEPS_FILE: &str = "steps.csv";
pub const LOCK_FILE: &str = ".lock";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
                "{} is locked by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Analyses read finished runs only.
pub fn ensure_unlocked(dir: &Path) -> Result<()> {
    if dir.join(LOCK_FILE).exists() {
        return Err(CliError::Data(format!("{} is still being written by a run", dir.display())));
    }
    Ok(())
}

/// Writes through a temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Optimizer steps completed at the end of the epoch.
    pub steps: u64,
    /// Mean loss over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
    pub gumbel_tau: Option<f64>,
    pub bits_mean: Option<f64>,
    pub bits_std: Option<f64>,
    pub active_fraction: Option<f64>,
    pub aggregate_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub file: String,
}

/// Everything deterministic about a pretraining run. Wall-clock time lives
/// in a separate file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64, overrides: Vec<String>) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            overrides,
            epochs: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Drops everything recorded after `step`.
    pub fn truncate_to(&mut self, step: u64) {
        self.epochs.retain(|e| e.steps <= step);
        self.checkpoints.retain(|c| c.step <= step);
    }
}

/// Leading columns of every CSV row.
#[derive(Clone, Debug)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
}

pub const STAMP_COLUMNS: [&str; 4] = ["schema_version", "config_hash", "seed", "step"];

impl Stamp {
    pub fn fields(&self) -> Vec<String> {
        vec![SCHEMA_VERSION.to_string(), self.config_hash.clone(), self.seed.to_string(), self.step.to_string()]
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes a whole CSV: the stamp columns, then `columns`.
pub fn write_csv(path: &Path, columns: &[&str], rows: &[(Stamp, Vec<String>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = STAMP_COLUMNS.iter().chain(columns).copied().collect();
    w.write_record(&header)?;
    for (stamp, values) in rows {
        w.write_record(stamp.fields().iter().chain(values))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}
