use rand::Rng;

use super::layers::{Linear, Mlp};
use super::params::ParamStore;
use super::Graph;
use crate::distributions::{threshold_bits, uniform_noise, GumbelBernoulli, Hardness};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Supervised baseline: backbone, then a Gumbel-Bernoulli layer on the
/// backbone output that is skipped for a whole batch with probability
/// `p_drop`, then a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedBernoulli {
    pub params: ParamStore,
    pub backbone: Mlp,
    pub classifier: Linear,
    pub temperature: f64,
    pub hardness: Hardness,
    pub num_classes: usize,
}

/// Mean softmax cross-entropy of `logits` rows against `labels`.
pub fn mean_cross_entropy(tape: &mut Tape, logits: crate::tensor::Var, labels: &[usize]) -> Result<crate::tensor::Var> {
    let targets = labels.iter().enumerate().map(|(i, &c)| (i, c)).collect();
    let terms = tape.cross_entropy(logits, None, targets)?;
    tape.mean(terms, None)
}

impl SupervisedBernoulli {
    pub fn new(backbone_widths: &[usize], num_classes: usize, temperature: f64, seed: u64) -> Result<Self> {
        if backbone_widths.len() < 2 || num_classes < 2 {
            return Err(Error::Parameter("supervised model needs a backbone and >= 2 classes".into()));
        }
        GumbelBernoulli::new(temperature, Hardness::Soft)?;
        let mut r = rng::stream(seed, &[rng::purpose::INIT]);
        let mut params = ParamStore::new();
        let backbone = Mlp::new(&mut params, "backbone", backbone_widths, &mut r);
        let classifier = Linear::new(&mut params, "classifier", backbone.out_dim(), num_classes, &mut r);
        Ok(SupervisedBernoulli { params, backbone, classifier, temperature, hardness: Hardness::Soft, num_classes })
    }

    /// Records the loss with the Bernoulli layer either bypassed or fed `uniform` noise.
    pub fn loss_graph(&self, images: &Tensor, labels: &[usize], bypass: bool, uniform: &Tensor) -> Result<Graph> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(images.clone());
        let h = self.backbone.forward(&mut tape, &bound, x)?;
        let features = if bypass {
            h
        } else {
            GumbelBernoulli::new(self.temperature, self.hardness)?.sample(&mut tape, h, uniform)?
        };
        let logits = self.classifier.forward(&mut tape, &bound, features)?;
        let loss = mean_cross_entropy(&mut tape, logits, labels)?;
        Ok(Graph { tape, bound, loss, views: Some(x), representations: vec![features], log_var: None })
    }

    /// One forward/backward pass. Returns the loss and whether the Bernoulli
    /// layer was dropped for this batch.
    pub fn forward(&mut self, images: &Tensor, labels: &[usize], p_drop: f64, rng: &mut impl Rng) -> Result<(f64, bool)> {
        if !(0.0..=1.0).contains(&p_drop) {
            return Err(Error::Parameter(format!("p_drop must lie in [0, 1], got {p_drop}")));
        }
        let bypass = rng.random::<f64>() < p_drop;
        let uniform = uniform_noise(rng, &[images.shape()[0], self.backbone.out_dim()]);
        let mut g = self.loss_graph(images, labels, bypass, &uniform)?;
        let loss = g.tape.item(g.loss)?;
        g.tape.backward(g.loss)?;
        self.params.accumulate_grads(&g.tape, &g.bound);
        Ok((loss, bypass))
    }

    /// Predictions through the deterministic Bernoulli layer (threshold at 0.5).
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let h = self.backbone.apply(&self.params, images)?;
        let logits = self.classifier.apply(&self.params, &threshold_bits(&h))?;
        Ok(argmax_rows(&logits))
    }
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_uniform_classifier_loss_is_log_c() {
        let mut m = SupervisedBernoulli::new(&[4, 3], 5, 0.5, 0).unwrap();
        // zero classifier weights give uniform logits
        let w = m.classifier.weight;
        m.params.get_mut(w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let mut r = rng::stream(0, &[0]);
        let (loss, _) = m.forward(&x, &[0, 3], 0.5, &mut r).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn drop_probability_extremes() {
        let mut m = SupervisedBernoulli::new(&[4, 3], 2, 0.5, 0).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.5; 8]).unwrap();
        let mut r = rng::stream(1, &[0]);
        for _ in 0..20 {
            assert!(m.forward(&x, &[0, 1], 1.0, &mut r).unwrap().1);
            assert!(!m.forward(&x, &[0, 1], 0.0, &mut r).unwrap().1);
        }
        assert!(m.forward(&x, &[0, 1], 1.5, &mut r).is_err());
    }

    #[test]
    fn bypass_matches_plain_classifier() {
        let m = SupervisedBernoulli::new(&[4, 3], 2, 0.5, 9).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.5, -0.2, 0.1, 0.9, 0.3, 0.3, -0.7, 0.0]).unwrap();
        let g = m.loss_graph(&x, &[1, 0], true, &Tensor::full(&[2, 3], 0.5)).unwrap();
        let h = m.backbone.apply(&m.params, &x).unwrap();
        let logits = m.classifier.apply(&m.params, &h).unwrap();
        let mut manual = 0.0;
        for (i, &c) in [1usize, 0].iter().enumerate() {
            let row = logits.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            manual += (lse - row[c]) / 2.0;
        }
        assert!((g.tape.item(g.loss).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::matrix(2, 3, vec![1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
