use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::probe::accuracy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SupervisedBernoulli;
use crate::optim::{lr_at, LrSchedule, Optimizer, OptimizerConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub backbone_hidden: Vec<usize>,
    /// Width of the Bernoulli layer (the backbone output).
    pub latent_dim: usize,
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of bypassing the Bernoulli layer for a batch.
    pub p_drop: f64,
    pub temperature: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            backbone_hidden: vec![256, 256],
            latent_dim: 32,
            epochs: 30,
            lr: 1e-3,
            batch_size: 64,
            p_drop: 0.5,
            temperature: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedOutcome {
    pub top1: f64,
    pub losses: Vec<f64>,
    /// Whether the Bernoulli layer was bypassed, per step.
    pub dropped: Vec<bool>,
    pub model: SupervisedBernoulli,
}

/// Supervised training with layer dropout over the Bernoulli layer; test
/// accuracy uses thresholded bits.
pub fn train_supervised_bernoulli(
    data: &Dataset,
    train: &[usize],
    test: &[usize],
    config: &SupervisedConfig,
    seed: u64,
) -> Result<SupervisedOutcome> {
    if train.is_empty() || test.is_empty() || config.batch_size == 0 {
        return Err(Error::Contract("supervised training needs train and test images".into()));
    }
    let mut widths = vec![data.height * data.width * data.channels];
    widths.extend(&config.backbone_hidden);
    widths.push(config.latent_dim);
    let mut model = SupervisedBernoulli::new(&widths, data.num_classes, config.temperature, seed)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(), &model.params)?;
    let batch = config.batch_size.min(train.len());
    let steps_per_epoch = train.len().div_ceil(batch) as u64;
    let sched = LrSchedule::step_decay(config.lr, (config.epochs * steps_per_epoch).max(1));
    let mut order = train.to_vec();
    let (mut losses, mut dropped) = (Vec::new(), Vec::new());
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &[rng::purpose::SHUFFLE, epoch]));
        for chunk in order.chunks(batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut r = rng::stream(seed, &[rng::purpose::LAYER_DROP, step]);
            model.params.zero_grad();
            let (loss, bypass) = model.forward(&data.normalized(chunk), &labels, config.p_drop, &mut r)?;
            if !loss.is_finite() {
                return Err(Error::Numerical { step, reason: "non-finite supervised loss".into() });
            }
            opt.step(&mut model.params, lr_at(step, &sched))?;
            losses.push(loss);
            dropped.push(bypass);
            step += 1;
        }
    }
    let yte: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    let top1 = accuracy(&model.predict(&data.normalized(test))?, &yte);
    model.params.zero_grad();
    Ok(SupervisedOutcome { top1, losses, dropped, model })
}
