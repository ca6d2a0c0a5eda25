use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forest::{rf_fit, ForestConfig};
use super::metrics::macro_f1;
use crate::data::stratified_kfold;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub mean_f1: f64,
    pub fold_f1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSweepResult {
    pub points: Vec<SweepPoint>,
}

impl FeatureSweepResult {
    pub fn at(&self, k: usize) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.k == k)
    }
}

/// Columns `cols` of the rows `rows`.
fn submatrix(x: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let data = rows.iter().flat_map(|&r| cols.iter().map(move |&c| x.row(r)[c])).collect();
    Tensor::matrix(rows.len(), cols.len(), data).expect("submatrix")
}

/// For each fold: rank features by forest importance on the training part,
/// refit on the top `k`, and score macro F1 on the held-out part.
#[allow(clippy::too_many_arguments)]
pub fn f1_vs_units(
    x: &Tensor,
    labels: &[usize],
    num_classes: usize,
    k_values: &[usize],
    folds: usize,
    forest: &ForestConfig,
    seed: u64,
) -> Result<FeatureSweepResult> {
    let (_, d) = x.dims2()?;
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > d) {
        return Err(Error::Contract(format!("k = {k} outside [1, {d}]")));
    }
    let splits = stratified_kfold(labels, folds, seed)?;
    let mut fold_scores = vec![Vec::with_capacity(splits.len()); k_values.len()];
    for (f, (train, held)) in splits.iter().enumerate() {
        let fold_seed = rng::mix(seed, &[rng::purpose::FOREST, f as u64]);
        let all: Vec<usize> = (0..d).collect();
        let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let yte: Vec<usize> = held.iter().map(|&i| labels[i]).collect();
        let ranking = rf_fit(&submatrix(x, train, &all), &ytr, num_classes, forest, fold_seed)?.ranking();
        for (slot, &k) in k_values.iter().enumerate() {
            let cols = &ranking[..k];
            let model = rf_fit(&submatrix(x, train, cols), &ytr, num_classes, forest, fold_seed)?;
            let pred = model.predict(&submatrix(x, held, cols))?;
            fold_scores[slot].push(macro_f1(&pred, &yte, num_classes));
        }
    }
    let points = k_values
        .iter()
        .zip(fold_scores)
        .map(|(&k, fold_f1)| SweepPoint { k, mean_f1: fold_f1.iter().sum::<f64>() / fold_f1.len() as f64, fold_f1 })
        .collect();
    Ok(FeatureSweepResult { points })
}

/// Binary features where `informative` of `d` columns carry the class code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedBitSpec {
    pub n: usize,
    pub d: usize,
    pub informative: usize,
    pub num_classes: usize,
    /// Probability that an informative bit is flipped.
    pub flip_prob: f64,
}

impl Default for PlantedBitSpec {
    fn default() -> Self {
        PlantedBitSpec { n: 600, d: 32, informative: 3, num_classes: 8, flip_prob: 0.02 }
    }
}

/// Features, labels and the informative column positions. Class `c` is
/// written in binary over the informative columns; all other columns are fair coins.
pub fn planted_bit_features(spec: &PlantedBitSpec, seed: u64) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let b = spec.informative;
    if b == 0 || b > spec.d || b >= usize::BITS as usize || spec.num_classes < 2 || spec.num_classes > 1 << b {
        return Err(Error::Parameter(format!("cannot code {} classes in {b} of {} bits", spec.num_classes, spec.d)));
    }
    let mut r = rng::stream(seed, &[rng::purpose::DATASET, 2]);
    let mut cols: Vec<usize> = (0..spec.d).collect();
    cols.shuffle(&mut r);
    let mut planted = cols[..b].to_vec();
    planted.sort_unstable();
    let labels: Vec<usize> = (0..spec.n).map(|_| r.random_range(0..spec.num_classes)).collect();
    let mut data = Vec::with_capacity(spec.n * spec.d);
    for &l in &labels {
        let mut row: Vec<f64> = (0..spec.d).map(|_| r.random_range(0..2) as f64).collect();
        for (bit, &c) in planted.iter().enumerate() {
            let mut v = (l >> bit) & 1;
            if r.random::<f64>() < spec.flip_prob {
                v ^= 1;
            }
            row[c] = v as f64;
        }
        data.extend(row);
    }
    Ok((Tensor::matrix(spec.n, spec.d, data)?, labels, planted))
}
