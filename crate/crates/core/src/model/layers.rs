use rand::Rng;

use super::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Affine map `x·W + b` over the rows of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in scaled uniform weights `U(-1/√in, 1/√in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::matrix(in_dim, out_dim, w).expect("weight shape"),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let xw = tape.matmul(x, bound.var(self.weight))?;
        let b = tape.broadcast_rows(bound.var(self.bias), rows)?;
        tape.add(xw, b)
    }

    /// Plain forward without recording.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&store.get(self.weight).value)?;
        let b = store.get(self.bias).value.data();
        let cols = self.out_dim;
        for row in out.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
        }
        Ok(out)
    }
}

/// Stack of affine layers with ReLU between consecutive layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| Linear::param_count(w[0], w[1])).sum()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bound, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(store, &x)?;
            if i + 1 < self.layers.len() {
                x = x.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        Ok(x)
    }
}
