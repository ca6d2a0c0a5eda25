//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Brute-force InfoNCE: explicit double loop over cosine similarities and a
/// naive (unshifted) exponential sum.
pub fn brute_force_infonce(rows: &[Vec<f64>], pairs: &[(usize, usize)], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for &(i, j) in pairs {
        let num = (cos(&rows[i], &rows[j]) / tau).exp();
        let mut den = 0.0;
        for k in 0..rows.len() {
            if k != i {
                den += (cos(&rows[i], &rows[k]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / pairs.len() as f64
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Hardened relaxed-Bernoulli draws at logit `phi`, computed directly from
/// the closed form rather than through the tape.
pub fn hard_bernoulli_draws(phi: f64, tau: f64, uniforms: &[f64]) -> Vec<f64> {
    uniforms
        .iter()
        .map(|&u| {
            let u = u.clamp(1e-7, 1.0 - 1e-7);
            let z = 1.0 / (1.0 + (-(phi + u.ln() - (1.0 - u).ln()) / tau).exp());
            if z >= 0.5 { 1.0 } else { 0.0 }
        })
        .collect()
}
