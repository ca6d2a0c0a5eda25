use crate::error::{Error, Result};

/// Per-class F1 averaged over the classes that occur in `labels` or `pred`.
pub fn macro_f1(pred: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut tp = vec![0.0; num_classes];
    let mut fp = vec![0.0; num_classes];
    let mut fneg = vec![0.0; num_classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if p == l {
            tp[p] += 1.0;
        } else {
            fp[p] += 1.0;
            fneg[l] += 1.0;
        }
    }
    let scores: Vec<f64> = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0.0)
        .map(|c| 2.0 * tp[c] / (2.0 * tp[c] + fp[c] + fneg[c]))
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Input bits over latent bits: `H·W·C·bits_per_pixel / latent_bits`.
pub fn compression_ratio(input_shape: &[usize], bits_per_pixel: u32, latent_bits: usize) -> Result<f64> {
    if latent_bits == 0 {
        return Err(Error::Contract("latent bit count must be positive".into()));
    }
    if input_shape.is_empty() || input_shape.contains(&0) || bits_per_pixel == 0 {
        return Err(Error::Contract("input dimensions must be positive".into()));
    }
    let input_bits = input_shape.iter().product::<usize>() as f64 * bits_per_pixel as f64;
    Ok(input_bits / latent_bits as f64)
}
