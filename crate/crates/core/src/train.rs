//! Contrastive pretraining loop.
//!
//! A run is fully determined by its config, seed and step counter: batch
//! order, augmentations and latent noise are all drawn from streams keyed by
//! `(seed, step)`, so a run resumed from a checkpoint continues bit for bit.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{make_views, AugmentationFamily, Dataset};
use crate::distributions::{temperature_at, TemperatureSchedule};
use crate::error::{Error, Result};
use crate::model::{Distribution, ModelConfig, StochConModel};
use crate::optim::{lr_at, LrSchedule, Optimizer, OptimizerConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    WarmupCosine,
    StepDecay,
    Constant,
}

/// Temperature anneal endpoints; the anneal runs per optimizer step over the whole run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GumbelConfig {
    pub start: f64,
    pub end: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { start: 1.0, end: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleKind,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub gumbel: GumbelConfig,
    pub augmentation: AugmentationFamily,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::lars(),
            schedule: ScheduleKind::WarmupCosine,
            base_lr: 1.0,
            warmup_fraction: 0.1,
            epochs: 200,
            batch_size: 64,
            gumbel: GumbelConfig::default(),
            augmentation: AugmentationFamily::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        let field = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Parameter(format!("invalid training config field `{name}`")))
            }
        };
        field("base_lr", self.base_lr >= 0.0 && self.base_lr.is_finite())?;
        field("warmup_fraction", (0.0..=1.0).contains(&self.warmup_fraction))?;
        field("batch_size", self.batch_size >= 2)?;
        TemperatureSchedule::new(self.gumbel.start, self.gumbel.end, 1).map(|_| ())
    }

    /// Optimizer steps per epoch over `n` training images (the last partial batch is dropped).
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n / self.batch_size).max(1) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.epochs * self.steps_per_epoch(n)
    }

    pub fn lr_schedule(&self, n: usize) -> LrSchedule {
        let total = self.total_steps(n).max(1);
        match self.schedule {
            ScheduleKind::WarmupCosine => LrSchedule::WarmupCosine {
                base_lr: self.base_lr,
                warmup_steps: (total as f64 * self.warmup_fraction).round() as u64,
                total_steps: total,
            },
            ScheduleKind::StepDecay => LrSchedule::step_decay(self.base_lr, total),
            ScheduleKind::Constant => LrSchedule::Constant { base_lr: self.base_lr },
        }
    }

    pub fn temperature_schedule(&self, n: usize) -> TemperatureSchedule {
        TemperatureSchedule { start: self.gumbel.start, end: self.gumbel.end, total_steps: self.total_steps(n).max(1) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    /// Relaxation temperature, for Bernoulli models.
    pub gumbel_tau: Option<f64>,
}

/// Model, optimizer and position of one pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrainer {
    pub config: TrainConfig,
    pub seed: u64,
    pub model: StochConModel,
    pub optimizer: Optimizer,
    pub step: u64,
}

impl Pretrainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = StochConModel::new(config.model.clone(), seed)?;
        let optimizer = Optimizer::new(config.optimizer, &model.params)?;
        Ok(Pretrainer { config, seed, model, optimizer, step: 0 })
    }

    /// Training image indices used at `step`.
    pub fn batch_indices(&self, train: &[usize], step: u64) -> Vec<usize> {
        let spe = self.config.steps_per_epoch(train.len());
        let epoch = step / spe;
        let pos = (step % spe) as usize;
        let mut order = train.to_vec();
        order.shuffle(&mut rng::stream(self.seed, &[rng::purpose::SHUFFLE, epoch]));
        let b = self.config.batch_size.min(order.len());
        order[pos * b..(pos + 1) * b].to_vec()
    }

    /// One optimizer step on `data` restricted to the `train` indices.
    pub fn step_once(&mut self, data: &Dataset, train: &[usize]) -> Result<StepLog> {
        if train.len() < 2 {
            return Err(Error::Contract("pretraining needs at least 2 training images".into()));
        }
        let step = self.step;
        let n = train.len();
        let batch = self.batch_indices(train, step);
        let layout = self.config.model.layout(batch.len())?;
        let views = make_views(data, &batch, &layout, &self.config.augmentation, self.seed, step)?;
        let tau = if self.config.model.distribution == Distribution::Bernoulli {
            Some(temperature_at(step.min(self.config.total_steps(n)), &self.config.temperature_schedule(n))?)
        } else {
            None
        };
        let lr = lr_at(step, &self.config.lr_schedule(n));
        self.model.params.zero_grad();
        let loss = self.model.forward_pretrain(&views, &layout, tau.unwrap_or(1.0), self.seed, step)?;
        if !loss.is_finite() {
            return Err(Error::Numerical { step, reason: "non-finite loss".into() });
        }
        self.optimizer.step(&mut self.model.params, lr)?;
        if self.model.params.iter().any(|p| !p.value.all_finite()) {
            return Err(Error::Numerical { step, reason: "non-finite parameter after update".into() });
        }
        self.step += 1;
        Ok(StepLog { step, epoch: step / self.config.steps_per_epoch(n), loss, lr, gumbel_tau: tau })
    }

    /// Runs until `until_step` (or the end of training), calling `on_step` after each step.
    pub fn run(
        &mut self,
        data: &Dataset,
        train: &[usize],
        until_step: Option<u64>,
        mut on_step: impl FnMut(&Pretrainer, &StepLog) -> Result<()>,
    ) -> Result<()> {
        let end = until_step.unwrap_or(u64::MAX).min(self.config.total_steps(train.len()));
        while self.step < end {
            let log = self.step_once(data, train)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}
