use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stochcon_core::data::{make_synthetic_blobs, read_scds, stratified_split, BlobSpec, Dataset, Split};
use stochcon_core::eval::{BitCount, FinetuneConfig, ForestConfig, ProbeConfig, SupervisedConfig};
use stochcon_core::model::Distribution;
use stochcon_core::optim::OptimizerConfig;
use stochcon_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// SCDS file to load; synthetic blobs when absent.
    pub path: Option<PathBuf>,
    pub blobs: BlobSpec,
    /// Seed of the blob generator and of the train/test split.
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { path: None, blobs: BlobSpec { noise: 40.0, ..BlobSpec::default() }, seed: 0, test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bit_count: BitCount,
    pub k_values: Vec<usize>,
    pub folds: usize,
    pub forest: ForestConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { bit_count: BitCount::Ones, k_values: vec![1, 2, 4, 8, 16, 32], folds: 5, forest: ForestConfig::default() }
    }
}

/// Everything one run needs. `seed` and `out` are left out of the config hash,
/// so runs of one recipe share a hash across seeds and output locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Epochs between saved checkpoints; 0 keeps only the latest.
    pub checkpoint_every: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub supervised: SupervisedConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    /// The desk-scale recipe: 3-class blobs, 32 Bernoulli latents on the
    /// global views, soft variates, 200 epochs of batch 64 with Adam.
    fn default() -> Self {
        let mut train = TrainConfig { optimizer: OptimizerConfig::adam(), base_lr: 1e-3, ..TrainConfig::default() };
        train.model.distribution = Distribution::Bernoulli;
        train.model.latent_dim = 32;
        RunConfig {
            seed: 0,
            out: None,
            checkpoint_every: 50,
            dataset: DatasetConfig::default(),
            train,
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            supervised: SupervisedConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// A `key.path=value` override; the value is read as a TOML literal, or as a
/// bare string when it does not parse.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{raw}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override `{raw}` has an empty key")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{part}` is not a table")))?;
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies `overrides` in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            set_path(&mut table, &key, value)?;
        }
        let config: RunConfig = table.try_into().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: stochcon_core::Error| CliError::Usage(e.to_string());
        self.train.validate().map_err(usage)?;
        let field = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(CliError::Usage(format!("invalid config field `{name}`")))
            }
        };
        field("dataset.test_fraction", self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0)?;
        field("analysis.folds", self.analysis.folds >= 2)?;
        field("analysis.k_values", !self.analysis.k_values.is_empty())?;
        field("probe.epochs", self.probe.epochs > 0 && self.probe.batch_size > 0 && self.probe.lr > 0.0)?;
        field("finetune.batch_size", self.finetune.batch_size > 0 && self.finetune.lr > 0.0)?;
        Ok(())
    }

    /// SHA-256 of the key-sorted JSON form, without `seed` and `out`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("run config serializes to JSON");
        if let Some(map) = value.as_object_mut() {
            map.remove("seed");
            map.remove("out");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// The dataset and its stratified `(train, test)` indices. The model
    /// input width must match the images.
    pub fn dataset(&self) -> Result<(Dataset, Vec<usize>, Vec<usize>)> {
        let data = match &self.dataset.path {
            Some(p) => {
                let file = std::fs::File::open(p)
                    .map_err(|e| CliError::Data(format!("cannot open dataset {}: {e}", p.display())))?;
                read_scds(std::io::BufReader::new(file), Split::Train)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
            }
            None => make_synthetic_blobs(&self.dataset.blobs, self.dataset.seed).map_err(|e| CliError::Usage(e.to_string()))?,
        };
        let pixels = data.height * data.width * data.channels;
        if pixels != self.train.model.input_dim {
            return Err(CliError::Usage(format!(
                "invalid config field `train.model.input_dim`: images have {pixels} values, config says {}",
                self.train.model.input_dim
            )));
        }
        let (train, test) = stratified_split(&data.labels, self.dataset.test_fraction, self.dataset.seed)
            .map_err(|e| CliError::Data(e.to_string()))?;
        Ok((data, train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_keeps_config_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let c = RunConfig::from_toml("", &["train.base_lr=0.01".into(), "train.model.distribution=\"gaussian\"".into()]).unwrap();
        assert_eq!(c.train.base_lr, 0.01);
        assert_eq!(c.train.model.distribution, Distribution::Gaussian);
        assert_ne!(c.hash(), RunConfig::default().hash());
        let bare = RunConfig::from_toml("", &["train.model.placement=bottom".into()]).unwrap();
        assert_eq!(bare.train.model.placement, stochcon_core::model::Placement::Bottom);
    }

    #[test]
    fn shipped_recipe_is_the_default() {
        let text = include_str!("../configs/desk.toml");
        assert_eq!(RunConfig::from_toml(text, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn seed_and_out_do_not_change_hash() {
        let c = RunConfig::from_toml("seed = 9\nout = \"x\"", &[]).unwrap();
        assert_eq!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_fields_are_usage_errors() {
        for (text, name) in [("[train]\nbatch_size = 0", "batch_size"), ("[dataset]\ntest_fraction = 1.5", "test_fraction")] {
            let err = RunConfig::from_toml(text, &[]).unwrap_err();
            assert_eq!(err.exit_code(), 1);
            assert!(err.to_string().contains(name), "{err}");
        }
        assert!(RunConfig::from_toml("bogus = 1", &[]).is_err());
        assert!(RunConfig::from_toml("", &["novalue".into()]).is_err());
    }
}
