//! Pathwise-differentiable latent distributions.
//!
//! * Relaxed Bernoulli (binary Concrete): `z = sigmoid((φ + log u - log(1-u)) / τ)`
//!   with optional straight-through hardening.
//! * Isotropic Gaussian: `z = μ + exp(½·log σ²)·ε`.
//!
//! Noise is always passed in explicitly so a forward pass can be replayed
//! with the exact same draws.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Uniform draws are clamped to `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]` so the
/// logistic noise stays finite.
pub const UNIFORM_CLAMP: f64 = 1e-7;

/// Bounds applied to Gaussian log-variances.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hardness {
    /// Feed the relaxed variates forward.
    Soft,
    /// Feed exact {0, 1} variates forward, with straight-through gradients.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    /// σ² predicted from the same view's backbone output (collapses in practice).
    SameView,
    /// σ² predicted from the opposing branch's view of the same image.
    OpposingView,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelBernoulli {
    pub temperature: f64,
    pub hardness: Hardness,
}

impl GumbelBernoulli {
    pub fn new(temperature: f64, hardness: Hardness) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(GumbelBernoulli { temperature, hardness })
    }

    /// Draws a (possibly hardened) variate for every logit.
    pub fn sample(&self, tape: &mut Tape, logits: Var, uniform: &Tensor) -> Result<Var> {
        let relaxed = sample_relaxed_bernoulli(tape, logits, self.temperature, uniform)?;
        match self.hardness {
            Hardness::Soft => Ok(relaxed),
            Hardness::Hard => harden(tape, relaxed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsoGaussian {
    pub variance_source: VarianceSource,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

/// `log u - log(1 - u)` with `u` clamped away from 0 and 1.
pub fn logistic_noise(uniform: &Tensor) -> Tensor {
    uniform.map(|u| {
        let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
        u.ln() - (1.0 - u).ln()
    })
}

pub fn sample_relaxed_bernoulli(tape: &mut Tape, logits: Var, tau: f64, uniform: &Tensor) -> Result<Var> {
    check_temperature(tau)?;
    if tape.shape(logits) != uniform.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} != logits shape {:?}",
            uniform.shape(),
            tape.shape(logits)
        )));
    }
    let noise = tape.constant(logistic_noise(uniform));
    let perturbed = tape.add(logits, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    tape.sigmoid(scaled)
}

/// Straight-through hardening of relaxed Bernoulli variates.
pub fn harden(tape: &mut Tape, relaxed: Var) -> Result<Var> {
    tape.harden(relaxed)
}

/// `μ + exp(½·log_var)·ε`.
pub fn sample_gaussian(tape: &mut Tape, mean: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
    if tape.shape(mean) != tape.shape(log_var) || tape.shape(mean) != eps.shape() {
        return Err(Error::Dimension(format!(
            "gaussian shapes disagree: mean {:?}, log_var {:?}, noise {:?}",
            tape.shape(mean),
            tape.shape(log_var),
            eps.shape()
        )));
    }
    let half = tape.scale(log_var, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.constant(eps.clone());
    let spread = tape.mul(std, noise)?;
    tape.add(mean, spread)
}

/// Eval-time Bernoulli bits: 1 where `sigmoid(φ) ≥ 0.5`.
pub fn threshold_bits(logits: &Tensor) -> Tensor {
    logits.map(|p| if crate::tensor::sigmoid_value(p) >= 0.5 { 1.0 } else { 0.0 })
}

pub fn uniform_noise(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn normal_noise(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Single-cycle cosine anneal of the relaxation temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { start: 1.0, end: 0.1, total_steps: 1 }
    }
}

impl TemperatureSchedule {
    pub fn new(start: f64, end: f64, total_steps: u64) -> Result<Self> {
        check_temperature(start)?;
        check_temperature(end)?;
        if start < end {
            return Err(Error::Parameter(format!("temperature schedule must not increase ({start} -> {end})")));
        }
        if total_steps == 0 {
            return Err(Error::Parameter("temperature schedule needs total_steps > 0".into()));
        }
        Ok(TemperatureSchedule { start, end, total_steps })
    }

    /// A schedule that stays at `value` (used while finetuning).
    pub fn constant(value: f64) -> Self {
        TemperatureSchedule { start: value, end: value, total_steps: 1 }
    }
}

pub fn temperature_at(step: u64, sched: &TemperatureSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::Parameter(format!(
            "step {step} beyond schedule length {}",
            sched.total_steps
        )));
    }
    let progress = step as f64 / sched.total_steps as f64;
    Ok(sched.end + 0.5 * (sched.start - sched.end) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_noise_is_plain_sigmoid() {
        let mut tape = Tape::new();
        let phi = tape.constant(Tensor::vector(vec![-2.0, 0.0, 1.5]));
        let z = sample_relaxed_bernoulli(&mut tape, phi, 0.5, &Tensor::full(&[3], 0.5)).unwrap();
        for (got, p) in tape.value(z).data().iter().zip([-2.0f64, 0.0, 1.5]) {
            let want = 1.0 / (1.0 + (-p / 0.5).exp());
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn bad_temperature_rejected() {
        let mut tape = Tape::new();
        let phi = tape.constant(Tensor::vector(vec![0.0]));
        let u = Tensor::vector(vec![0.5]);
        assert!(matches!(sample_relaxed_bernoulli(&mut tape, phi, 0.0, &u), Err(Error::Parameter(_))));
        assert!(GumbelBernoulli::new(-1.0, Hardness::Soft).is_err());
    }

    #[test]
    fn extreme_uniform_draws_stay_finite() {
        let noise = logistic_noise(&Tensor::vector(vec![0.0, 1.0]));
        assert!(noise.all_finite());
        assert!(noise.data()[0] < -16.0 && noise.data()[1] > 16.0);
    }

    #[test]
    fn harden_thresholds() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::vector(vec![0.3, 0.5]));
        let h = harden(&mut tape, r).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 1.0]);
    }

    #[test]
    fn gaussian_zero_noise_returns_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::vector(vec![0.25, -3.0]));
        let lv = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let z = sample_gaussian(&mut tape, mu, lv, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(tape.value(z).data(), &[0.25, -3.0]);
        let bad = sample_gaussian(&mut tape, mu, lv, &Tensor::zeros(&[3]));
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn relaxed_variates_monotone_in_logits() {
        let mut r = rng::stream(3, &[0]);
        let u = uniform_noise(&mut r, &[50]);
        let mut tape = Tape::new();
        let lo = tape.constant(Tensor::full(&[50], -0.3));
        let hi = tape.constant(Tensor::full(&[50], 0.2));
        let zl = sample_relaxed_bernoulli(&mut tape, lo, 0.7, &u).unwrap();
        let zh = sample_relaxed_bernoulli(&mut tape, hi, 0.7, &u).unwrap();
        for (a, b) in tape.value(zl).data().iter().zip(tape.value(zh).data()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = TemperatureSchedule::new(1.0, 0.1, 100).unwrap();
        assert_eq!(temperature_at(0, &s).unwrap(), 1.0);
        assert_eq!(temperature_at(100, &s).unwrap(), 0.1);
        assert!((temperature_at(50, &s).unwrap() - 0.55).abs() < 1e-12);
        assert!(matches!(temperature_at(101, &s), Err(Error::Parameter(_))));
        assert!(TemperatureSchedule::new(0.1, 1.0, 10).is_err());
        assert_eq!(temperature_at(0, &TemperatureSchedule::constant(0.1)).unwrap(), 0.1);
        assert_eq!(temperature_at(1, &TemperatureSchedule::constant(0.1)).unwrap(), 0.1);
    }
}
