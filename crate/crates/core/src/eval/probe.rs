use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::uniform_noise;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Linear, ParamStore, StochConModel};
use crate::optim::{lr_at, LrSchedule, Optimizer, OptimizerConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Frozen,
    Finetuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mode: ProbeMode,
    pub top1: f64,
    pub epochs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 100, lr: 1e-2, batch_size: 64 }
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    let first = labels.first().ok_or_else(|| Error::Contract("no training labels".into()))?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::Contract("probe needs at least two classes in the training labels".into()));
    }
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Contract("label outside the class range".into()));
    }
    Ok(())
}

/// Column means and standard deviations of the training features (unit scale for constant columns).
fn standardizer(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut sd = vec![0.0; d];
    for r in 0..n {
        sd.iter_mut().zip(x.row(r)).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
    }
    let sd = sd.into_iter().map(|s| if s > 1e-12 { s.sqrt() } else { 1.0 }).collect();
    Ok((mean, sd))
}

fn standardize(x: &Tensor, mean: &[f64], sd: &[f64]) -> Tensor {
    let d = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(sd) {
            *v = (*v - m) / s;
        }
    }
    out
}

fn select(x: &Tensor, rows: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Tensor::matrix(rows.len(), d, data).expect("row selection")
}

/// Multinomial logistic regression on fixed features, trained with Adam on
/// standardized inputs. Returns held-out top-1.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    check_labels(train_y, num_classes)?;
    let (n, d) = train_x.dims2()?;
    if n != train_y.len() || test_x.dims2()?.0 != test_y.len() || test_x.shape()[1] != d {
        return Err(Error::Dimension("probe features and labels disagree".into()));
    }
    let (mean, sd) = standardizer(train_x)?;
    let xs = standardize(train_x, &mean, &sd);
    let mut params = ParamStore::new();
    let head = Linear::new(&mut params, "probe", d, num_classes, &mut rng::stream(seed, &[rng::purpose::PROBE, 0]));
    let mut opt = Optimizer::new(OptimizerConfig::adam(), &params)?;
    let batch = config.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &[rng::purpose::PROBE, 1, epoch]));
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let x = tape.constant(select(&xs, chunk));
            let logits = head.forward(&mut tape, &bound, x)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = crate::model::mean_cross_entropy(&mut tape, logits, &labels)?;
            tape.backward(loss)?;
            params.zero_grad();
            params.accumulate_grads(&tape, &bound);
            opt.step(&mut params, config.lr)?;
        }
    }
    let pred = argmax_rows(&head.apply(&params, &standardize(test_x, &mean, &sd))?);
    Ok(ProbeResult { mode: ProbeMode::Frozen, top1: accuracy(&pred, test_y), epochs: config.epochs })
}

/// Frozen probe on the model's deterministic representation.
pub fn probe_model(
    model: &StochConModel,
    data: &Dataset,
    train: &[usize],
    test: &[usize],
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let tr = model.representation(&data.normalized(train))?;
    let te = model.representation(&data.normalized(test))?;
    let ytr: Vec<usize> = train.iter().map(|&i| data.labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    linear_probe(&tr, &ytr, &te, &yte, data.num_classes, config, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Relaxation temperature, held fixed for the whole run.
    pub temperature: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 30, lr: 3e-4, batch_size: 64, temperature: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub result: ProbeResult,
    /// Temperature used at every step.
    pub temperatures: Vec<f64>,
    pub losses: Vec<f64>,
    /// The network after finetuning, without the classifier.
    pub model: StochConModel,
}

/// Trains the whole network plus a new linear classifier on un-augmented
/// images with Adam and a step decay of 0.1 at 80% of training.
pub fn finetune(
    model: &StochConModel,
    data: &Dataset,
    train: &[usize],
    test: &[usize],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let ytr: Vec<usize> = train.iter().map(|&i| data.labels[i]).collect();
    check_labels(&ytr, data.num_classes)?;
    let mut net = model.clone();
    let base_params = net.params.len();
    let rep_dim = net.representation_dim();
    let head = Linear::new(
        &mut net.params,
        "classifier",
        rep_dim,
        data.num_classes,
        &mut rng::stream(seed, &[rng::purpose::PROBE, 2]),
    );
    let mut opt = Optimizer::new(OptimizerConfig::adam(), &net.params)?;
    let batch = config.batch_size.clamp(1, train.len());
    let steps_per_epoch = train.len().div_ceil(batch) as u64;
    let sched = LrSchedule::step_decay(config.lr, (config.epochs * steps_per_epoch).max(1));
    let mut order = train.to_vec();
    let mut temperatures = Vec::new();
    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &[rng::purpose::PROBE, 3, epoch]));
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape, true);
            let x = tape.constant(data.normalized(chunk));
            let uniform = uniform_noise(
                &mut rng::stream(seed, &[rng::purpose::LATENT_NOISE, 1, step]),
                &[chunk.len(), net.config.latent_dim],
            );
            let features = net.finetune_features(&mut tape, &bound, x, config.temperature, &uniform)?;
            let logits = head.forward(&mut tape, &bound, features)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = crate::model::mean_cross_entropy(&mut tape, logits, &labels).map_err(|e| numerical(e, step))?;
            losses.push(tape.item(loss)?);
            tape.backward(loss)?;
            net.params.zero_grad();
            net.params.accumulate_grads(&tape, &bound);
            opt.step(&mut net.params, lr_at(step, &sched))?;
            if net.params.iter().any(|p| !p.value.all_finite()) {
                return Err(Error::Numerical { step, reason: "non-finite parameter while finetuning".into() });
            }
            temperatures.push(config.temperature);
            step += 1;
        }
    }
    let logits = head.apply(&net.params, &net.representation(&data.normalized(test))?)?;
    let yte: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    let top1 = accuracy(&argmax_rows(&logits), &yte);
    net.params.truncate(base_params);
    net.params.zero_grad();
    Ok(FinetuneOutcome {
        result: ProbeResult { mode: ProbeMode::Finetuned, top1, epochs: config.epochs },
        temperatures,
        losses,
        model: net,
    })
}

fn numerical(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite(op) => Error::Numerical { step, reason: format!("non-finite value in {op}") },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, d: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        use rand::Rng;
        let mut r = rng::stream(seed, &[]);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = labels
            .iter()
            .flat_map(|&l| {
                let shift = if l == 1 { sep } else { -sep };
                (0..d).map(|j| if j == 0 { shift + r.random_range(-0.5..0.5) } else { r.random_range(-1.0..1.0) }).collect::<Vec<_>>()
            })
            .collect();
        (Tensor::matrix(n, d, data).unwrap(), labels)
    }

    #[test]
    fn separable_features_are_probed_perfectly() {
        let (x, y) = blobs(200, 4, 2.0, 1);
        let (tx, ty) = blobs(100, 4, 2.0, 2);
        // margin oracle: the first coordinate alone separates the classes
        assert!((0..100).all(|i| (tx.row(i)[0] > 0.0) == (ty[i] == 1)));
        let r = linear_probe(&x, &y, &tx, &ty, 2, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(r.top1, 1.0);
    }

    #[test]
    fn constant_features_predict_majority_class() {
        let y: Vec<usize> = (0..90).map(|i| if i < 60 { 0 } else { 1 }).collect();
        let x = Tensor::full(&[90, 3], 0.7);
        let ty: Vec<usize> = (0..30).map(|i| if i < 20 { 0 } else { 1 }).collect();
        let tx = Tensor::full(&[30, 3], 0.7);
        let r = linear_probe(&x, &y, &tx, &ty, 2, &ProbeConfig { epochs: 20, ..ProbeConfig::default() }, 0).unwrap();
        assert!((r.top1 - 20.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::full(&[4, 2], 1.0);
        assert!(matches!(
            linear_probe(&x, &[1, 1, 1, 1], &x, &[1, 1, 1, 1], 2, &ProbeConfig::default(), 0),
            Err(Error::Contract(_))
        ));
    }
}
