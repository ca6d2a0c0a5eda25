//! The stochastic contrastive model.
//!
//! Every view goes through the backbone `f`. Views on the stochastic branch
//! are then pushed through the latent path `π → q → ρ` before the head `g`;
//! the remaining views go straight from `f` to `g`. All views, positives and
//! negatives alike, are fed to InfoNCE.

mod layers;
mod params;
mod supervised;
mod views;

pub use layers::{Linear, Mlp};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore};
pub use supervised::{argmax_rows, mean_cross_entropy, SupervisedBernoulli};
pub use views::ViewLayout;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    normal_noise, sample_gaussian, threshold_bits, uniform_noise, GumbelBernoulli, Hardness, VarianceSource,
    LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::error::{Error, Result};
use crate::objective::{infonce_loss, InfoNceConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// No latent variable: plain SimCLR.
    None,
    Bernoulli,
    Gaussian,
}

/// Which views carry the latent variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Global views (or the first view when there are no local views).
    Top,
    /// Local views (or the last global view when there are no local views).
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    BackboneFeatures,
    LatentProbs,
    LatentHard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub backbone_dim: usize,
    pub proj_dim: usize,
    pub latent_dim: usize,
    /// When false, π and ρ are identities and the latent lives in backbone space.
    pub bottleneck: bool,
    pub distribution: Distribution,
    pub placement: Placement,
    pub hardness: Hardness,
    pub variance_source: VarianceSource,
    /// Latent samples per view; the loss is averaged over them.
    pub samples: usize,
    pub n_global: usize,
    pub n_local: usize,
    pub infonce: InfoNceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 256,
            backbone_hidden: vec![256, 256],
            backbone_dim: 128,
            proj_dim: 64,
            latent_dim: 32,
            bottleneck: true,
            distribution: Distribution::Bernoulli,
            placement: Placement::Top,
            hardness: Hardness::Soft,
            variance_source: VarianceSource::OpposingView,
            samples: 1,
            n_global: 2,
            n_local: 2,
            infonce: InfoNceConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Parameter(format!("invalid model config field `{name}`")))
            }
        };
        field("input_dim", self.input_dim > 0)?;
        field("backbone_hidden", self.backbone_hidden.iter().all(|&w| w > 0))?;
        field("backbone_dim", self.backbone_dim > 0)?;
        field("proj_dim", self.proj_dim > 0)?;
        field("latent_dim", self.latent_dim > 0)?;
        field("latent_dim", self.bottleneck || self.latent_dim == self.backbone_dim)?;
        field("samples", self.samples >= 1)?;
        field("n_global", self.n_global >= 1)?;
        field("n_local", self.n_global + self.n_local >= 2)?;
        self.infonce.validate()?;
        self.layout(2)?;
        Ok(())
    }

    pub fn backbone_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.backbone_hidden);
        w.push(self.backbone_dim);
        w
    }

    pub fn head_widths(&self) -> Vec<usize> {
        vec![self.backbone_dim, self.backbone_dim, self.proj_dim]
    }

    pub fn layout(&self, n_images: usize) -> Result<ViewLayout> {
        ViewLayout::new(n_images, self.n_global, self.n_local, self.placement)
    }

    /// Output width of the encoder π, if it has one.
    fn encoder_out(&self) -> Option<usize> {
        match (self.distribution, self.bottleneck) {
            (Distribution::None, _) => None,
            (Distribution::Bernoulli, true) => Some(self.latent_dim),
            (Distribution::Bernoulli, false) => None,
            (Distribution::Gaussian, true) => Some(2 * self.latent_dim),
            // Mean is the identity; only the log-variance needs a map.
            (Distribution::Gaussian, false) => Some(self.latent_dim),
        }
    }

    fn has_decoder(&self) -> bool {
        self.distribution != Distribution::None && self.bottleneck
    }

    /// Scalar parameter count:
    /// backbone + head (`D_B·D_B + D_B + D_B·D_proj + D_proj`)
    /// + encoder (`D_B·out + out`) + decoder (`D_L·D_B + D_B`).
    pub fn param_count(&self) -> usize {
        let mut n = Mlp::param_count(&self.backbone_widths()) + Mlp::param_count(&self.head_widths());
        if let Some(out) = self.encoder_out() {
            n += Linear::param_count(self.backbone_dim, out);
        }
        if self.has_decoder() {
            n += Linear::param_count(self.latent_dim, self.backbone_dim);
        }
        n
    }
}

/// Noise for every latent sample of one forward pass: one `[stochastic rows × D_L]`
/// tensor per sample. Uniform draws for Bernoulli, standard normal for Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub samples: Vec<Tensor>,
}

impl LatentNoise {
    pub fn none() -> Self {
        LatentNoise { samples: Vec::new() }
    }

    pub fn draw(config: &ModelConfig, rows: usize, rng: &mut impl Rng) -> Self {
        let shape = [rows, config.latent_dim];
        let samples = match config.distribution {
            Distribution::None => Vec::new(),
            Distribution::Bernoulli => (0..config.samples).map(|_| uniform_noise(rng, &shape)).collect(),
            Distribution::Gaussian => (0..config.samples).map(|_| normal_noise(rng, &shape)).collect(),
        };
        LatentNoise { samples }
    }

    pub fn zeros(config: &ModelConfig, rows: usize) -> Self {
        let samples = (0..config.samples).map(|_| Tensor::zeros(&[rows, config.latent_dim])).collect();
        LatentNoise { samples }
    }
}

/// A recorded forward pass.
pub struct Graph {
    pub tape: Tape,
    pub bound: Bound,
    pub loss: Var,
    /// The view matrix leaf.
    pub views: Option<Var>,
    /// Head outputs `v`, one per latent sample.
    pub representations: Vec<Var>,
    /// Clamped Gaussian log-variances of the stochastic rows.
    pub log_var: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochConModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Mlp,
    pub head: Mlp,
    pub encoder: Option<Linear>,
    pub decoder: Option<Linear>,
}

impl StochConModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::purpose::INIT]);
        let mut params = ParamStore::new();
        let backbone = Mlp::new(&mut params, "backbone", &config.backbone_widths(), &mut r);
        let head = Mlp::new(&mut params, "head", &config.head_widths(), &mut r);
        let encoder = config
            .encoder_out()
            .map(|out| Linear::new(&mut params, "encoder", config.backbone_dim, out, &mut r));
        let decoder = config
            .has_decoder()
            .then(|| Linear::new(&mut params, "decoder", config.latent_dim, config.backbone_dim, &mut r));
        Ok(StochConModel { config, params, backbone, head, encoder, decoder })
    }

    fn check_views(&self, views: &Tensor, layout: &ViewLayout) -> Result<()> {
        let (rows, cols) = views.dims2()?;
        if rows != layout.rows() || cols != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "views are {rows}x{cols}, expected {}x{}",
                layout.rows(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// `(μ or logits, log σ²)` for the stochastic rows. The log-variance is
    /// only produced for the Gaussian and is clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    fn latent_params(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        rows: &[usize],
        opposing: &[usize],
    ) -> Result<(Var, Option<Var>)> {
        let d = self.config.latent_dim;
        let h_s = tape.select_rows(h, rows.to_vec())?;
        match self.config.distribution {
            Distribution::None => Err(Error::Contract("latent path requested without a distribution".into())),
            Distribution::Bernoulli => match &self.encoder {
                Some(enc) => Ok((enc.forward(tape, bound, h_s)?, None)),
                None => Ok((h_s, None)),
            },
            Distribution::Gaussian => {
                let enc = self.encoder.as_ref().expect("gaussian model has an encoder");
                let var_input = match self.config.variance_source {
                    VarianceSource::SameView => h_s,
                    VarianceSource::OpposingView => tape.select_rows(h, opposing.to_vec())?,
                };
                let (mean, log_var) = if self.config.bottleneck {
                    let p = enc.forward(tape, bound, h_s)?;
                    let mean = tape.slice_cols(p, 0, d)?;
                    let q = match self.config.variance_source {
                        VarianceSource::SameView => p,
                        VarianceSource::OpposingView => enc.forward(tape, bound, var_input)?,
                    };
                    (mean, tape.slice_cols(q, d, 2 * d)?)
                } else {
                    (h_s, enc.forward(tape, bound, var_input)?)
                };
                let log_var = tape.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
                Ok((mean, Some(log_var)))
            }
        }
    }

    /// Records the full pretraining loss for `views` (rows laid out per `layout`).
    pub fn pretrain_graph(
        &self,
        views: &Tensor,
        layout: &ViewLayout,
        gumbel_tau: f64,
        noise: &LatentNoise,
        trainable: bool,
    ) -> Result<Graph> {
        self.pretrain_graph_opts(views, layout, gumbel_tau, noise, trainable, false)
    }

    /// As [`StochConModel::pretrain_graph`], optionally recording the views as
    /// a differentiable leaf so input gradients can be inspected.
    pub fn pretrain_graph_opts(
        &self,
        views: &Tensor,
        layout: &ViewLayout,
        gumbel_tau: f64,
        noise: &LatentNoise,
        trainable: bool,
        input_grad: bool,
    ) -> Result<Graph> {
        self.check_views(views, layout)?;
        let pairing = layout.pairing()?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, trainable);
        let x = tape.leaf(views.clone(), input_grad);
        let h = self.backbone.forward(&mut tape, &bound, x)?;

        if self.config.distribution == Distribution::None {
            let v = self.head.forward(&mut tape, &bound, h)?;
            let loss = infonce_loss(&mut tape, v, &pairing, &self.config.infonce)?;
            return Ok(Graph { tape, bound, loss, views: Some(x), representations: vec![v], log_var: None });
        }

        let stochastic = layout.stochastic_rows();
        let deterministic = layout.deterministic_rows();
        let opposing: Vec<usize> = stochastic.iter().map(|&r| layout.opposing_row(r)).collect();
        if noise.samples.len() != self.config.samples {
            return Err(Error::Contract(format!(
                "expected {} noise samples, got {}",
                self.config.samples,
                noise.samples.len()
            )));
        }
        // Row order after concatenating [deterministic, stochastic] back to layout order.
        let mut restore = vec![0; layout.rows()];
        for (k, &r) in deterministic.iter().chain(&stochastic).enumerate() {
            restore[r] = k;
        }

        let (param, log_var) = self.latent_params(&mut tape, &bound, h, &stochastic, &opposing)?;
        let h_det = (!deterministic.is_empty())
            .then(|| tape.select_rows(h, deterministic.clone()))
            .transpose()?;
        let mut losses = Vec::with_capacity(noise.samples.len());
        let mut representations = Vec::with_capacity(noise.samples.len());
        for eps in &noise.samples {
            let z = match log_var {
                None => GumbelBernoulli::new(gumbel_tau, self.config.hardness)?.sample(&mut tape, param, eps)?,
                Some(lv) => sample_gaussian(&mut tape, param, lv, eps)?,
            };
            let h2 = match &self.decoder {
                Some(dec) => dec.forward(&mut tape, &bound, z)?,
                None => z,
            };
            let joined = match h_det {
                Some(hd) => tape.concat_rows(vec![hd, h2])?,
                None => h2,
            };
            let all = tape.select_rows(joined, restore.clone())?;
            let v = self.head.forward(&mut tape, &bound, all)?;
            representations.push(v);
            losses.push(infonce_loss(&mut tape, v, &pairing, &self.config.infonce)?);
        }
        let loss = if losses.len() == 1 {
            losses[0]
        } else {
            let stacked = losses
                .iter()
                .map(|&l| tape.reshape(l, vec![1]))
                .collect::<Result<Vec<_>>>()?;
            let mut total = stacked[0];
            for &s in &stacked[1..] {
                total = tape.add(total, s)?;
            }
            let mean = tape.scale(total, 1.0 / losses.len() as f64)?;
            tape.reshape(mean, vec![])?
        };
        Ok(Graph { tape, bound, loss, views: Some(x), representations, log_var })
    }

    /// Loss value only, no gradients.
    pub fn pretrain_loss(&self, views: &Tensor, layout: &ViewLayout, gumbel_tau: f64, noise: &LatentNoise) -> Result<f64> {
        let g = self.pretrain_graph(views, layout, gumbel_tau, noise, false)?;
        g.tape.item(g.loss)
    }

    /// One forward/backward pass: draws latent noise for `step`, accumulates
    /// parameter gradients, and returns the loss.
    pub fn forward_pretrain(
        &mut self,
        views: &Tensor,
        layout: &ViewLayout,
        gumbel_tau: f64,
        seed: u64,
        step: u64,
    ) -> Result<f64> {
        let mut r = rng::stream(seed, &[rng::purpose::LATENT_NOISE, step]);
        let noise = LatentNoise::draw(&self.config, layout.stochastic_rows().len(), &mut r);
        self.forward_backward(views, layout, gumbel_tau, &noise)
            .map_err(|e| match e {
                Error::NonFinite(op) => Error::Numerical { step, reason: format!("non-finite value in {op}") },
                other => other,
            })
    }

    pub fn forward_backward(&mut self, views: &Tensor, layout: &ViewLayout, gumbel_tau: f64, noise: &LatentNoise) -> Result<f64> {
        let mut g = self.pretrain_graph(views, layout, gumbel_tau, noise, true)?;
        let loss = g.tape.item(g.loss)?;
        g.tape.backward(g.loss)?;
        self.params.accumulate_grads(&g.tape, &g.bound);
        Ok(loss)
    }

    /// Backbone features `h` for un-augmented images `[N × input_dim]`.
    pub fn backbone_features(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.apply(&self.params, images)
    }

    /// Deterministic latent parameters: Bernoulli logits or Gaussian means.
    fn latent_location(&self, h: &Tensor) -> Result<Tensor> {
        let d = self.config.latent_dim;
        match (self.config.distribution, &self.encoder) {
            (Distribution::None, _) => Err(Error::Contract("model has no latent distribution".into())),
            (Distribution::Bernoulli, Some(enc)) => enc.apply(&self.params, h),
            (Distribution::Bernoulli, None) => Ok(h.clone()),
            (Distribution::Gaussian, Some(enc)) if self.config.bottleneck => {
                let p = enc.apply(&self.params, h)?;
                slice_cols(&p, 0, d)
            }
            (Distribution::Gaussian, _) => Ok(h.clone()),
        }
    }

    /// Bernoulli logits `π(h)`.
    pub fn latent_logits(&self, images: &Tensor) -> Result<Tensor> {
        if self.config.distribution != Distribution::Bernoulli {
            return Err(Error::Contract("bernoulli model required".into()));
        }
        self.latent_location(&self.backbone_features(images)?)
    }

    /// Clamped Gaussian log-variances on the eval path, where both branches
    /// see the same un-augmented image.
    pub fn latent_log_variance(&self, images: &Tensor) -> Result<Tensor> {
        if self.config.distribution != Distribution::Gaussian {
            return Err(Error::Contract("gaussian model required".into()));
        }
        let d = self.config.latent_dim;
        let h = self.backbone_features(images)?;
        let enc = self.encoder.as_ref().expect("gaussian model has an encoder");
        let p = enc.apply(&self.params, &h)?;
        let lv = if self.config.bottleneck { slice_cols(&p, d, 2 * d)? } else { p };
        Ok(lv.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)))
    }

    pub fn encode(&self, images: &Tensor, mode: EncodeMode) -> Result<Tensor> {
        let h = self.backbone_features(images)?;
        match mode {
            EncodeMode::BackboneFeatures => Ok(h),
            EncodeMode::LatentProbs => {
                let loc = self.latent_location(&h)?;
                match self.config.distribution {
                    Distribution::Bernoulli => Ok(loc.map(crate::tensor::sigmoid_value)),
                    _ => Ok(loc),
                }
            }
            EncodeMode::LatentHard => match self.config.distribution {
                Distribution::Bernoulli => Ok(threshold_bits(&self.latent_location(&h)?)),
                _ => Err(Error::Contract("hard latent bits need a bernoulli model".into())),
            },
        }
    }

    /// The frozen representation used for probing: hard bits (Bernoulli),
    /// means (Gaussian) or backbone features (no latent).
    pub fn representation(&self, images: &Tensor) -> Result<Tensor> {
        match self.config.distribution {
            Distribution::None => self.encode(images, EncodeMode::BackboneFeatures),
            Distribution::Bernoulli => self.encode(images, EncodeMode::LatentHard),
            Distribution::Gaussian => self.encode(images, EncodeMode::LatentProbs),
        }
    }

    pub fn representation_dim(&self) -> usize {
        match self.config.distribution {
            Distribution::None => self.config.backbone_dim,
            _ => self.config.latent_dim,
        }
    }

    /// Records the classifier input used while finetuning: relaxed (or hard)
    /// Bernoulli variates at `gumbel_tau`, Gaussian means, or raw features.
    pub fn finetune_features(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: Var,
        gumbel_tau: f64,
        uniform: &Tensor,
    ) -> Result<Var> {
        let h = self.backbone.forward(tape, bound, images)?;
        let rows = tape.shape(h)[0];
        let all: Vec<usize> = (0..rows).collect();
        match self.config.distribution {
            Distribution::None => Ok(h),
            Distribution::Bernoulli => {
                let (logits, _) = self.latent_params(tape, bound, h, &all, &all)?;
                GumbelBernoulli::new(gumbel_tau, self.config.hardness)?.sample(tape, logits, uniform)
            }
            Distribution::Gaussian => {
                let (mean, _) = self.latent_params(tape, bound, h, &all, &all)?;
                Ok(mean)
            }
        }
    }
}

fn slice_cols(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (rows, _) = t.dims2()?;
    let mut data = Vec::with_capacity(rows * (end - start));
    for r in 0..rows {
        data.extend_from_slice(&t.row(r)[start..end]);
    }
    Tensor::matrix(rows, end - start, data)
}
