//! Random forest classifier with Gini importance.
//!
//! Per-node feature subsets are chosen by hashing `(seed, tree, node, column
//! fingerprint)` rather than column positions, and split ties are broken in
//! that hashed order. Reordering the feature columns therefore reorders the
//! importances and leaves everything else unchanged.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 100, max_depth: 12, min_samples_split: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Split { feature: usize, threshold: f64, gain: f64, left: usize, right: usize },
    Leaf { probs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_probs(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf { probs } => return probs,
            }
        }
    }

    pub fn split_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<Tree>,
    pub num_classes: usize,
    pub n_features: usize,
    /// Total impurity decrease per feature, normalized to sum to 1 (all zero without splits).
    pub importance: Vec<f64>,
}

/// Order-independent hash of a column's values.
fn fingerprint(x: &Tensor, col: usize) -> u64 {
    let (n, _) = x.dims2().expect("matrix");
    let bits: Vec<u64> = (0..n).map(|r| x.row(r)[col].to_bits()).collect();
    rng::mix(0x5eed, &bits)
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a Tensor,
    labels: &'a [usize],
    num_classes: usize,
    fingerprints: &'a [u64],
    per_node: usize,
    config: ForestConfig,
    seed: u64,
    tree: u64,
    total: f64,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

impl Builder<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; self.num_classes];
        for &r in rows {
            c[self.labels[r]] += 1.0;
        }
        c
    }

    /// Features considered at `node`, in hashed order.
    fn candidates(&self, node: u64) -> Vec<usize> {
        let mut keyed: Vec<(u64, usize)> = self
            .fingerprints
            .iter()
            .enumerate()
            .map(|(j, &fp)| (rng::mix(self.seed, &[self.tree, node, fp]), j))
            .collect();
        keyed.sort_unstable_by_key(|&(k, _)| k);
        keyed.truncate(self.per_node);
        keyed.into_iter().map(|(_, j)| j).collect()
    }

    /// Best `(feature, threshold, weighted impurity decrease)` for `rows`.
    fn best_split(&self, rows: &[usize], node: u64, parent: &[f64]) -> Option<(usize, f64, f64)> {
        let n = rows.len() as f64;
        let parent_impurity = gini(parent, n);
        let mut best: Option<(usize, f64, f64)> = None;
        for j in self.candidates(node) {
            let mut vals: Vec<(f64, usize)> = rows.iter().map(|&r| (self.x.row(r)[j], self.labels[r])).collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0.0; self.num_classes];
            let mut right = parent.to_vec();
            for i in 0..vals.len() - 1 {
                left[vals[i].1] += 1.0;
                right[vals[i].1] -= 1.0;
                if vals[i].0 == vals[i + 1].0 {
                    continue;
                }
                let nl = (i + 1) as f64;
                let nr = n - nl;
                let decrease = n * parent_impurity - nl * gini(&left, nl) - nr * gini(&right, nr);
                if decrease > 1e-12 && best.is_none_or(|b| decrease > b.2) {
                    best = Some((j, 0.5 * (vals[i].0 + vals[i + 1].0), decrease));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, node: u64) -> usize {
        let counts = self.counts(&rows);
        let id = self.nodes.len();
        let n = rows.len() as f64;
        let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
        let split = if pure || depth >= self.config.max_depth || rows.len() < self.config.min_samples_split {
            None
        } else {
            self.best_split(&rows, node, &counts)
        };
        match split {
            None => {
                self.nodes.push(Node::Leaf { probs: counts.iter().map(|c| c / n).collect() });
                id
            }
            Some((feature, threshold, decrease)) => {
                self.nodes.push(Node::Leaf { probs: Vec::new() });
                self.importance[feature] += decrease / self.total;
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x.row(i)[feature] <= threshold);
                let left = self.grow(l, depth + 1, node.wrapping_mul(2));
                let right = self.grow(r, depth + 1, node.wrapping_mul(2).wrapping_add(1));
                self.nodes[id] = Node::Split { feature, threshold, gain: decrease, left, right };
                id
            }
        }
    }
}

/// Bagged Gini trees over `⌊√D⌋` hashed feature candidates per node.
pub fn rf_fit(x: &Tensor, labels: &[usize], num_classes: usize, config: &ForestConfig, seed: u64) -> Result<RandomForest> {
    let (n, d) = x.dims2()?;
    if d == 0 {
        return Err(Error::Contract("random forest needs at least one feature".into()));
    }
    if n != labels.len() || n == 0 {
        return Err(Error::Dimension("features and labels disagree".into()));
    }
    if num_classes < 2 || labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Contract("random forest needs >= 2 classes and labels in range".into()));
    }
    if config.n_trees == 0 || config.max_depth == 0 {
        return Err(Error::Parameter("forest needs trees and depth".into()));
    }
    let fingerprints: Vec<u64> = (0..d).map(|j| fingerprint(x, j)).collect();
    let per_node = ((d as f64).sqrt().floor() as usize).max(1);
    let grown: Vec<(Tree, Vec<f64>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[rng::purpose::FOREST, t as u64]);
            let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let mut b = Builder {
                x,
                labels,
                num_classes,
                fingerprints: &fingerprints,
                per_node,
                config: *config,
                seed,
                tree: t as u64,
                total: n as f64,
                nodes: Vec::new(),
                importance: vec![0.0; d],
            };
            b.grow(rows, 0, 1);
            (Tree { nodes: b.nodes }, b.importance)
        })
        .collect();
    let mut importance = vec![0.0; d];
    for (_, imp) in &grown {
        importance.iter_mut().zip(imp).for_each(|(a, b)| *a += b);
    }
    let total: f64 = importance.iter().sum();
    if total > 0.0 {
        importance.iter_mut().for_each(|v| *v /= total);
    }
    let trees = grown.into_iter().map(|(t, _)| t).collect();
    Ok(RandomForest { trees, num_classes, n_features: d, importance })
}

impl RandomForest {
    /// Class with the highest mean leaf probability (lowest index on ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (n, d) = x.dims2()?;
        if d != self.n_features {
            return Err(Error::Dimension(format!("forest expects {} features, got {d}", self.n_features)));
        }
        Ok((0..n)
            .map(|r| {
                let mut votes = vec![0.0; self.num_classes];
                for t in &self.trees {
                    votes.iter_mut().zip(t.predict_probs(x.row(r))).for_each(|(v, p)| *v += p);
                }
                let mut best = 0;
                for (k, &v) in votes.iter().enumerate() {
                    if v > votes[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Feature indices by decreasing importance, lowest index first on ties.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_features).collect();
        idx.sort_by(|&a, &b| self.importance[b].total_cmp(&self.importance[a]).then(a.cmp(&b)));
        idx
    }
}
