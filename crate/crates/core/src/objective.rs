//! InfoNCE over a batch of views.
//!
//! For an anchor row `i` with positive `j`,
//!
//! ```text
//! ℓ(i, j) = -log( exp(sim(v_i, v_j)/τ) / Σ_{k≠i} exp(sim(v_i, v_k)/τ) )
//! ```
//!
//! where `sim` is cosine similarity. The loss is the mean of `ℓ` over every
//! (anchor, positive) pair of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfoNceConfig {
    /// Similarity temperature τ.
    pub temperature: f64,
    /// Norm floor used by the cosine similarity.
    pub eps_norm: f64,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        InfoNceConfig { temperature: 0.2, eps_norm: 1e-12 }
    }
}

impl InfoNceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(format!("InfoNCE temperature must be positive, got {}", self.temperature)))
        }
    }
}

/// Which rows are anchors and which rows are their positives.
///
/// Every row other than the anchor itself enters the anchor's denominator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    rows: usize,
    pairs: Vec<(usize, usize)>,
}

impl Pairing {
    /// Builds a pairing from a partner index per row plus the rows allowed to act as anchors.
    pub fn from_pair_index(pair_index: &[Option<usize>], anchor_mask: &[bool]) -> Result<Self> {
        let rows = pair_index.len();
        if anchor_mask.len() != rows {
            return Err(Error::Dimension(format!(
                "anchor mask has {} entries for {rows} rows",
                anchor_mask.len()
            )));
        }
        for (i, p) in pair_index.iter().enumerate() {
            if let Some(j) = *p {
                if j >= rows || j == i || pair_index[j] != Some(i) {
                    return Err(Error::Contract(format!("pair index is not an involution at row {i}")));
                }
            }
        }
        let mut pairs = Vec::new();
        for (i, &anchor) in anchor_mask.iter().enumerate() {
            if anchor {
                let j = pair_index[i].ok_or_else(|| Error::Contract(format!("anchor row {i} has no positive")))?;
                pairs.push((i, j));
            }
        }
        Pairing::from_pairs(rows, pairs)
    }

    fn from_pairs(rows: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if rows < 4 {
            return Err(Error::Contract(format!("need at least 4 view rows, got {rows}")));
        }
        if pairs.is_empty() {
            return Err(Error::Contract("pairing has no anchors".into()));
        }
        Ok(Pairing { rows, pairs })
    }

    /// Standard two-view layout: rows `[view0 of images 0..n, view1 of images 0..n]`,
    /// every row an anchor whose positive is the other view of its image.
    pub fn two_view(n_images: usize) -> Result<Self> {
        Pairing::multi_crop(n_images, 2, 0)
    }

    /// Multi-crop layout with view-major rows (`row = view * n_images + image`),
    /// global views first. Global views are the anchors; every other view of
    /// the same image is a positive.
    pub fn multi_crop(n_images: usize, n_global: usize, n_local: usize) -> Result<Self> {
        if n_images < 2 {
            return Err(Error::Contract(format!("need at least 2 images, got {n_images}")));
        }
        let views = n_global + n_local;
        if n_global == 0 || views < 2 {
            return Err(Error::Contract(format!(
                "need a global view and a second view, got {n_global} global + {n_local} local"
            )));
        }
        let mut pairs = Vec::new();
        for g in 0..n_global {
            for n in 0..n_images {
                for other in (0..views).filter(|&o| o != g) {
                    pairs.push((g * n_images + n, other * n_images + n));
                }
            }
        }
        Pairing::from_pairs(views * n_images, pairs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Distinct anchor rows in ascending order.
    pub fn anchors(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        a.sort_unstable();
        a.dedup();
        a
    }
}

/// `⟨a,b⟩ / (max(‖a‖,eps) · max(‖b‖,eps))`.
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    dot / (na * nb)
}

/// Records the InfoNCE loss of representation rows `v` on the tape.
pub fn infonce_loss(tape: &mut Tape, v: Var, pairing: &Pairing, cfg: &InfoNceConfig) -> Result<Var> {
    cfg.validate()?;
    let (rows, _) = tape.value(v).dims2()?;
    if rows != pairing.rows() {
        return Err(Error::Dimension(format!(
            "pairing covers {} rows but the batch has {rows}",
            pairing.rows()
        )));
    }
    let unit = tape.l2_normalize(v, cfg.eps_norm)?;
    let unit_t = tape.transpose(unit)?;
    let sims = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(sims, 1.0 / cfg.temperature)?;

    let anchors = pairing.anchors();
    let mut position = vec![usize::MAX; rows];
    for (a, &row) in anchors.iter().enumerate() {
        position[row] = a;
    }
    let anchor_logits = tape.select_rows(logits, anchors.clone())?;
    let mut mask = vec![true; anchors.len() * rows];
    for (a, &row) in anchors.iter().enumerate() {
        mask[a * rows + row] = false;
    }
    let targets = pairing.pairs().iter().map(|&(i, j)| (position[i], j)).collect();
    let terms = tape.cross_entropy(anchor_logits, Some(mask), targets)?;
    tape.mean(terms, None)
}

/// Loss value without keeping the tape.
pub fn infonce_value(v: &Tensor, pairing: &Pairing, cfg: &InfoNceConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let var = tape.constant(v.clone());
    let loss = infonce_loss(&mut tape, var, pairing, cfg)?;
    tape.item(loss)
}
