//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};

pub const LARS_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Lars { momentum: f64, weight_decay: f64, trust_coeff: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }

    pub fn lars() -> Self {
        OptimizerConfig::Lars { momentum: 0.9, weight_decay: 1e-6, trust_coeff: 0.001 }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerConfig::Lars { momentum, weight_decay, trust_coeff } => {
                (0.0..1.0).contains(&momentum) && weight_decay >= 0.0 && trust_coeff > 0.0
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid optimizer constants {self:?}")))
        }
    }

    /// Number of state buffers kept per parameter.
    pub fn slots(&self) -> usize {
        match self {
            OptimizerConfig::Adam { .. } => 2,
            _ => 1,
        }
    }
}

/// Per-parameter buffers: momentum for SGD/LARS, first and second moments for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: Vec<Vec<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, params: &ParamStore) -> Self {
        let slots = params.iter().map(|p| vec![vec![0.0; p.value.len()]; config.slots()]).collect();
        OptimizerState { step: 0, slots }
    }

    fn check(&self, config: &OptimizerConfig, params: &ParamStore) -> Result<()> {
        let matches = self.slots.len() == params.len()
            && self.slots.iter().zip(params.iter()).all(|(s, p)| {
                s.len() == config.slots() && s.iter().all(|b| b.len() == p.value.len())
            });
        if matches {
            Ok(())
        } else {
            Err(Error::Dimension("optimizer state does not match parameters".into()))
        }
    }
}

/// `buf ← m·buf + g; w ← w − lr·buf`.
pub fn sgd_momentum_step(w: &mut [f64], g: &[f64], buf: &mut [f64], lr: f64, momentum: f64) {
    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        *b = momentum * *b + g;
        *w -= lr * *b;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Layer-wise trust ratio `trust·‖w‖ / (‖g + wd·w‖ + ε)`, 1 for an all-zero layer.
pub fn lars_local_lr(w: &[f64], g: &[f64], weight_decay: f64, trust_coeff: f64) -> f64 {
    let wn = norm(w);
    if wn == 0.0 {
        return 1.0;
    }
    let update: Vec<f64> = w.iter().zip(g).map(|(w, g)| g + weight_decay * w).collect();
    trust_coeff * wn / (norm(&update) + LARS_EPS)
}

/// LARS for one layer. Biases skip both the trust ratio and weight decay.
#[allow(clippy::too_many_arguments)]
pub fn lars_step(
    w: &mut [f64],
    g: &[f64],
    buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust_coeff: f64,
    kind: ParamKind,
) {
    let (local, wd) = match kind {
        ParamKind::Weight => (lars_local_lr(w, g, weight_decay, trust_coeff), weight_decay),
        ParamKind::Bias => (1.0, 0.0),
    };
    let scale = lr * local;
    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        *b = momentum * *b + scale * (g + wd * *w);
        *w -= *b;
    }
}

/// Bias-corrected Adam; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, state: OptimizerState::new(&config, params) })
    }

    pub fn with_state(config: OptimizerConfig, state: OptimizerState, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        state.check(&config, params)?;
        Ok(Optimizer { config, state })
    }

    /// Applies one update from the gradients held in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        self.state.check(&self.config, params)?;
        self.state.step += 1;
        let t = self.state.step;
        for (p, slots) in params.iter_mut().zip(self.state.slots.iter_mut()) {
            let g = p.grad.data().to_vec();
            let w = p.value.data_mut();
            match self.config {
                OptimizerConfig::Sgd { momentum } => sgd_momentum_step(w, &g, &mut slots[0], lr, momentum),
                OptimizerConfig::Lars { momentum, weight_decay, trust_coeff } => {
                    lars_step(w, &g, &mut slots[0], lr, momentum, weight_decay, trust_coeff, p.kind)
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (m, rest) = slots.split_at_mut(1);
                    adam_step(w, &g, &mut m[0], &mut rest[0], t, lr, beta1, beta2, eps)
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    WarmupCosine { base_lr: f64, warmup_steps: u64, total_steps: u64 },
    StepDecay { base_lr: f64, total_steps: u64, decay_factor: f64, decay_point: f64 },
    Constant { base_lr: f64 },
}

impl LrSchedule {
    /// Warmup over the first 10% of steps, then cosine to zero.
    pub fn warmup_cosine(base_lr: f64, total_steps: u64) -> Self {
        LrSchedule::WarmupCosine { base_lr, warmup_steps: total_steps / 10, total_steps }
    }

    /// Multiplies the rate by 0.1 from 80% of training on.
    pub fn step_decay(base_lr: f64, total_steps: u64) -> Self {
        LrSchedule::StepDecay { base_lr, total_steps, decay_factor: 0.1, decay_point: 0.8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::WarmupCosine { base_lr, warmup_steps, total_steps } => {
                base_lr >= 0.0 && total_steps > 0 && warmup_steps <= total_steps
            }
            LrSchedule::StepDecay { base_lr, total_steps, decay_factor, decay_point } => {
                base_lr >= 0.0 && total_steps > 0 && decay_factor >= 0.0 && (0.0..=1.0).contains(&decay_point)
            }
            LrSchedule::Constant { base_lr } => base_lr >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Learning rate at `step`; steps past the end are treated as the final step.
pub fn lr_at(step: u64, sched: &LrSchedule) -> f64 {
    match *sched {
        LrSchedule::WarmupCosine { base_lr, warmup_steps, total_steps } => {
            let t = step.min(total_steps);
            if t < warmup_steps {
                return base_lr * t as f64 / warmup_steps as f64;
            }
            let span = (total_steps - warmup_steps).max(1) as f64;
            let progress = (t - warmup_steps) as f64 / span;
            0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        LrSchedule::StepDecay { base_lr, total_steps, decay_factor, decay_point } => {
            if (step as f64) < decay_point * total_steps as f64 {
                base_lr
            } else {
                base_lr * decay_factor
            }
        }
        LrSchedule::Constant { base_lr } => base_lr,
    }
}
