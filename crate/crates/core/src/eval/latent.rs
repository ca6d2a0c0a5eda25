use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Distribution, EncodeMode, StochConModel};
use crate::tensor::Tensor;

/// How an example's active bits are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitCount {
    /// Dimensions with probability at least 0.5.
    #[default]
    Ones,
    /// `min(ones, zeros)`.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitStats {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub latent_dim: usize,
}

impl BitStats {
    pub fn active_fraction(&self) -> f64 {
        self.mean / self.latent_dim as f64
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Counts from a matrix of `{0, 1}` bits, one row per example.
pub fn bit_stats_from_bits(bits: &Tensor, rule: BitCount) -> Result<BitStats> {
    let (_, d) = bits.dims2()?;
    let counts: Vec<usize> = bits
        .data()
        .chunks(d)
        .map(|row| {
            let ones = row.iter().filter(|&&b| b >= 0.5).count();
            match rule {
                BitCount::Ones => ones,
                BitCount::Symmetric => ones.min(d - ones),
            }
        })
        .collect();
    let (mean, std) = mean_std(counts.iter().map(|&c| c as f64));
    Ok(BitStats { counts, mean, std, latent_dim: d })
}

/// Active bits of every image, read from the deterministic eval path on un-augmented images.
pub fn active_bit_count(model: &StochConModel, data: &Dataset, rule: BitCount) -> Result<BitStats> {
    if model.config.distribution != Distribution::Bernoulli {
        return Err(Error::Contract("bernoulli checkpoint required".into()));
    }
    let bits = model.encode(&data.all_normalized(), EncodeMode::LatentHard)?;
    bit_stats_from_bits(&bits, rule)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    /// Mean of `σ²(x)` over dimensions, then over examples.
    pub aggregate: f64,
    pub per_dimension: Vec<f64>,
}

/// Aggregate variance from a matrix of log-variances.
pub fn variance_stats_from_log_var(log_var: &Tensor) -> Result<VarianceStats> {
    let (n, d) = log_var.dims2()?;
    let var = log_var.map(f64::exp);
    let per_example: Vec<f64> = var.data().chunks(d).map(|r| r.iter().sum::<f64>() / d as f64).collect();
    let aggregate = per_example.iter().sum::<f64>() / n as f64;
    let per_dimension = (0..d).map(|j| (0..n).map(|i| var.data()[i * d + j]).sum::<f64>() / n as f64).collect();
    Ok(VarianceStats { aggregate, per_dimension })
}

pub fn aggregate_variance(model: &StochConModel, data: &Dataset) -> Result<VarianceStats> {
    if model.config.distribution != Distribution::Gaussian {
        return Err(Error::Contract("gaussian checkpoint required".into()));
    }
    variance_stats_from_log_var(&model.latent_log_variance(&data.all_normalized())?)
}
