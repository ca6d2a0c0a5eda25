use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use stochcon_core::checkpoint::{read_checkpoint, write_checkpoint};
use stochcon_core::data::Dataset;
use stochcon_core::eval::{
    active_bit_count, aggregate_variance, f1_vs_units, finetune, probe_model, train_supervised_bernoulli,
};
use stochcon_core::model::{Distribution, StochConModel};
use stochcon_core::train::{Pretrainer, StepLog};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run::{
    ensure_unlocked, fmt_f64, fmt_opt, write_atomic, write_csv, CheckpointRecord, EpochRecord, RunLock, RunManifest,
    Stamp, CHECKPOINT_DIR, CONFIG_FILE, LAST_CHECKPOINT, STEPS_FILE, TIMING_FILE,
};

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Common {
    /// Run config (TOML). Defaults to the run directory's config, then the built-in recipe.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to resume from or analyse.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Epochs of the command's own training loop.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Config override `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    /// `--set` overrides followed by the ones implied by `--seed` and
    /// `--epochs`; an empty `epochs_key` means the command has no epochs.
    fn overrides(&self, epochs_key: &str) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let (Some(e), false) = (self.epochs, epochs_key.is_empty()) {
            o.push(format!("{epochs_key}={e}"));
        }
        o
    }

    fn run_dir(&self, config: Option<&RunConfig>) -> Result<PathBuf> {
        if let Some(out) = &self.out {
            return Ok(out.clone());
        }
        if let Some(ck) = &self.checkpoint {
            if let Some(dir) = ck.parent().and_then(Path::parent) {
                return Ok(dir.to_path_buf());
            }
        }
        config
            .and_then(|c| c.out.clone())
            .ok_or_else(|| CliError::Usage("no run directory: pass --out".into()))
    }
}

fn load_config(common: &Common, dir: Option<&Path>, epochs_key: &str) -> Result<RunConfig> {
    let overrides = common.overrides(epochs_key);
    match (&common.config, dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists())) {
        (Some(path), _) => RunConfig::load(Some(path), &overrides),
        (None, Some(path)) => RunConfig::load(Some(&path), &overrides),
        (None, None) => RunConfig::load(None, &overrides),
    }
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step-{step:08}.ckpt"))
}

fn save_checkpoint(p: &Pretrainer, hash: &str, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(p, hash, &mut bytes)?;
    write_atomic(path, &bytes)
}

fn load_checkpoint(path: &Path) -> Result<(Pretrainer, String)> {
    let file = fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn epoch_stats(model: &StochConModel, data: &Dataset, config: &RunConfig) -> Result<(Option<(f64, f64, f64)>, Option<f64>)> {
    Ok(match model.config.distribution {
        Distribution::Bernoulli => {
            let b = active_bit_count(model, data, config.analysis.bit_count)?;
            (Some((b.mean, b.std, b.active_fraction())), None)
        }
        Distribution::Gaussian => (None, Some(aggregate_variance(model, data)?.aggregate)),
        Distribution::None => (None, None),
    })
}

const STEP_COLUMNS: [&str; 4] = ["epoch", "loss", "lr", "gumbel_tau"];

fn step_row(hash: &str, seed: u64, log: &StepLog) -> (Stamp, Vec<String>) {
    (
        Stamp { config_hash: hash.to_string(), seed, step: log.step },
        vec![log.epoch.to_string(), fmt_f64(log.loss), fmt_f64(log.lr), fmt_opt(log.gumbel_tau)],
    )
}

/// Rows of an existing steps file recorded before `step`.
fn read_step_rows(path: &Path, step: u64) -> Result<Vec<(Stamp, Vec<String>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let s: u64 = rec[3].parse().map_err(|_| CliError::Data(format!("{}: bad step column", path.display())))?;
        if s < step {
            let stamp = Stamp { config_hash: rec[1].to_string(), seed: rec[2].parse().unwrap_or_default(), step: s };
            rows.push((stamp, rec.iter().skip(4).map(str::to_string).collect()));
        }
    }
    Ok(rows)
}

/// Pretrains (or resumes) a run. `stop_after_epoch` ends the invocation
/// early, leaving a resumable `last.ckpt`.
pub fn pretrain(common: &Common, stop_after_epoch: Option<u64>) -> Result<()> {
    let (config, dir, mut p, mut manifest, mut step_rows) = match &common.checkpoint {
        None => {
            let config = load_config(common, None, "train.epochs")?;
            let dir = common.run_dir(Some(&config))?;
            if dir.join(crate::run::MANIFEST_FILE).exists() {
                return Err(CliError::Usage(format!(
                    "{} already holds a run; resume with --checkpoint or pick another --out",
                    dir.display()
                )));
            }
            let p = Pretrainer::new(config.train.clone(), config.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            let manifest = RunManifest::new(config.hash(), config.seed, common.overrides("train.epochs"));
            (config, dir, p, manifest, Vec::new())
        }
        Some(ck) => {
            if !common.set.is_empty() || common.epochs.is_some() || common.seed.is_some() || common.config.is_some() {
                return Err(CliError::Usage("a resumed run keeps its config; drop --config/--set/--seed/--epochs".into()));
            }
            let dir = common.run_dir(None)?;
            let config = load_config(common, Some(&dir), "train.epochs")?;
            let (p, tag) = load_checkpoint(ck)?;
            if tag != config.hash() || p.config != config.train || p.seed != config.seed {
                return Err(CliError::Data(format!("{} does not belong to the run in {}", ck.display(), dir.display())));
            }
            let mut manifest = RunManifest::load(&dir)?;
            manifest.truncate_to(p.step);
            let rows = read_step_rows(&dir.join(STEPS_FILE), p.step)?;
            (config, dir, p, manifest, rows)
        }
    };
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    let _lock = RunLock::acquire(&dir)?;
    let hash = config.hash();
    let mut stored = config.clone();
    stored.out = None;
    write_atomic(&dir.join(CONFIG_FILE), stored.to_toml().as_bytes())?;
    let (data, train, _) = config.dataset()?;
    let spe = config.train.steps_per_epoch(train.len());
    if p.step % spe != 0 {
        return Err(CliError::Data(format!("checkpoint step {} is not at an epoch boundary", p.step)));
    }
    let started = Instant::now();
    let total_epochs = config.train.epochs;
    let mut epoch = p.step / spe;
    let outcome = (|| -> Result<()> {
        while epoch < total_epochs && stop_after_epoch.is_none_or(|s| epoch < s) {
            let mut logs = Vec::with_capacity(spe as usize);
            p.run(&data, &train, Some((epoch + 1) * spe), |_, log| {
                logs.push(log.clone());
                Ok(())
            })?;
            step_rows.extend(logs.iter().map(|l| step_row(&hash, config.seed, l)));
            let (bits, variance) = epoch_stats(&p.model, &data, &config)?;
            let last = logs.last().expect("an epoch has steps");
            manifest.epochs.push(EpochRecord {
                epoch,
                steps: p.step,
                loss: logs.iter().map(|l| l.loss).sum::<f64>() / logs.len() as f64,
                lr: last.lr,
                gumbel_tau: last.gumbel_tau,
                bits_mean: bits.map(|b| b.0),
                bits_std: bits.map(|b| b.1),
                active_fraction: bits.map(|b| b.2),
                aggregate_variance: variance,
            });
            epoch += 1;
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let path = checkpoint_path(&dir, p.step);
                save_checkpoint(&p, &hash, &path)?;
                manifest.checkpoints.push(CheckpointRecord {
                    step: p.step,
                    file: format!("{CHECKPOINT_DIR}/{}", path.file_name().expect("file").to_string_lossy()),
                });
            }
            manifest.save(&dir)?;
            eprintln!(
                "epoch {epoch}/{total_epochs} step {} loss {:.4} lr {:.3e}{}",
                p.step,
                manifest.epochs.last().map(|e| e.loss).unwrap_or_default(),
                last.lr,
                last.gumbel_tau.map(|t| format!(" tau {t:.3}")).unwrap_or_default()
            );
        }
        Ok(())
    })();
    write_csv(&dir.join(STEPS_FILE), &STEP_COLUMNS, &step_rows)?;
    manifest.save(&dir)?;
    outcome?;
    save_checkpoint(&p, &hash, &dir.join(CHECKPOINT_DIR).join(LAST_CHECKPOINT))?;
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or_default();
    let timing = serde_json::json!({
        "finished_unix": now,
        "seconds": started.elapsed().as_secs_f64(),
        "steps": p.step,
    });
    write_atomic(&dir.join(TIMING_FILE), format!("{timing:#}\n").as_bytes())?;
    Ok(())
}

/// A finished run loaded for analysis.
struct Loaded {
    dir: PathBuf,
    config: RunConfig,
    pretrainer: Pretrainer,
    data: Dataset,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Loaded {
    fn open(common: &Common, epochs_key: &str) -> Result<Self> {
        let dir = common.run_dir(None)?;
        ensure_unlocked(&dir)?;
        let mut config = load_config(common, Some(&dir), epochs_key)?;
        let ck = common.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_DIR).join(LAST_CHECKPOINT));
        let (pretrainer, _) = load_checkpoint(&ck)?;
        if pretrainer.config != config.train {
            return Err(CliError::Data(format!("{} was trained with a different config", ck.display())));
        }
        if common.seed.is_none() {
            config.seed = pretrainer.seed;
        }
        let (data, train, test) = config.dataset()?;
        Ok(Loaded { dir, config, pretrainer, data, train, test })
    }

    fn stamp(&self) -> Stamp {
        Stamp { config_hash: self.config.hash(), seed: self.config.seed, step: self.pretrainer.step }
    }

    fn model(&self) -> &StochConModel {
        &self.pretrainer.model
    }
}

pub fn probe(common: &Common) -> Result<()> {
    let run = Loaded::open(common, "probe.epochs")?;
    let seed = run.config.seed;
    let random = StochConModel::new(run.config.train.model.clone(), seed)?;
    let mut rows = Vec::new();
    for (name, model) in [("pretrained", run.model()), ("random_init", &random)] {
        let r = probe_model(model, &run.data, &run.train, &run.test, &run.config.probe, seed)?;
        rows.push((run.stamp(), vec![name.into(), "frozen".into(), fmt_f64(r.top1), r.epochs.to_string()]));
    }
    write_csv(&run.dir.join("probe.csv"), &["backbone", "mode", "top1", "epochs"], &rows)
}

pub fn finetune_cmd(common: &Common) -> Result<()> {
    let run = Loaded::open(common, "finetune.epochs")?;
    let out = finetune(run.model(), &run.data, &run.train, &run.test, &run.config.finetune, run.config.seed)?;
    let stamp = run.stamp();
    write_csv(
        &run.dir.join("finetune.csv"),
        &["top1", "epochs"],
        &[(stamp.clone(), vec![fmt_f64(out.result.top1), out.result.epochs.to_string()])],
    )?;
    let steps: Vec<_> = out
        .losses
        .iter()
        .zip(&out.temperatures)
        .enumerate()
        .map(|(i, (l, t))| (stamp.clone(), vec![i.to_string(), fmt_f64(*l), fmt_f64(*t)]))
        .collect();
    write_csv(&run.dir.join("finetune_steps.csv"), &["finetune_step", "loss", "temperature"], &steps)
}

pub fn analyze_bits(common: &Common) -> Result<()> {
    let run = Loaded::open(common, "")?;
    let rule = run.config.analysis.bit_count;
    let b = active_bit_count(run.model(), &run.data, rule).map_err(|e| CliError::Data(e.to_string()))?;
    let rule_name = serde_json::to_value(rule).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    write_csv(
        &run.dir.join("bits.csv"),
        &["rule", "latent_dim", "mean", "std", "active_fraction"],
        &[(
            run.stamp(),
            vec![rule_name, b.latent_dim.to_string(), fmt_f64(b.mean), fmt_f64(b.std), fmt_f64(b.active_fraction())],
        )],
    )
}

pub fn analyze_variance(common: &Common) -> Result<()> {
    let run = Loaded::open(common, "")?;
    let v = aggregate_variance(run.model(), &run.data).map_err(|e| CliError::Data(e.to_string()))?;
    let mut rows = vec![(run.stamp(), vec!["all".to_string(), fmt_f64(v.aggregate)])];
    rows.extend(v.per_dimension.iter().enumerate().map(|(j, x)| (run.stamp(), vec![j.to_string(), fmt_f64(*x)])));
    write_csv(&run.dir.join("variance.csv"), &["dimension", "variance"], &rows)
}

pub fn analyze_units(common: &Common) -> Result<()> {
    let run = Loaded::open(common, "")?;
    let features = run.model().representation(&run.data.all_normalized())?;
    let a = &run.config.analysis;
    let res = f1_vs_units(&features, &run.data.labels, run.data.num_classes, &a.k_values, a.folds, &a.forest, run.config.seed)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let rows: Vec<_> = res
        .points
        .iter()
        .map(|p| (run.stamp(), vec![p.k.to_string(), fmt_f64(p.mean_f1), p.fold_f1.len().to_string()]))
        .collect();
    write_csv(&run.dir.join("units.csv"), &["k", "mean_f1", "folds"], &rows)
}

pub fn supervised_bernoulli(common: &Common) -> Result<()> {
    let dir = common.run_dir(None)?;
    let config = load_config(common, Some(&dir), "supervised.epochs")?;
    fs::create_dir_all(&dir)?;
    let (data, train, test) = config.dataset()?;
    let out = train_supervised_bernoulli(&data, &train, &test, &config.supervised, config.seed)?;
    let dropped = out.dropped.iter().filter(|&&d| d).count() as f64 / out.dropped.len().max(1) as f64;
    let stamp = Stamp { config_hash: config.hash(), seed: config.seed, step: out.losses.len() as u64 };
    write_csv(
        &dir.join("supervised_bernoulli.csv"),
        &["top1", "p_drop", "dropped_fraction", "final_loss", "epochs"],
        &[(
            stamp,
            vec![
                fmt_f64(out.top1),
                fmt_f64(config.supervised.p_drop),
                fmt_f64(dropped),
                fmt_opt(out.losses.last().copied()),
                config.supervised.epochs.to_string(),
            ],
        )],
    )
}
