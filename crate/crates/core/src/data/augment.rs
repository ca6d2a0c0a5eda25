use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropKind {
    Global,
    Local,
}

/// Simplified multi-crop augmentation family. Scales are fractions of the image area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationFamily {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip_prob: f64,
    pub noise_sigma: f64,
    pub brightness: f64,
}

impl Default for AugmentationFamily {
    fn default() -> Self {
        AugmentationFamily {
            global_scale: (0.5, 1.0),
            local_scale: (0.15, 0.5),
            flip_prob: 0.5,
            noise_sigma: 8.0 / 255.0,
            brightness: 0.2,
        }
    }
}

impl AugmentationFamily {
    /// Draws nothing random: full crop, no flip, no jitter, no noise.
    pub fn identity() -> Self {
        AugmentationFamily {
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            flip_prob: 0.0,
            noise_sigma: 0.0,
            brightness: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if range_ok(self.global_scale)
            && range_ok(self.local_scale)
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.noise_sigma >= 0.0
            && self.brightness >= 0.0
        {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid augmentation family {self:?}")))
        }
    }
}

/// The geometric and photometric draws of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    pub side_h: usize,
    pub side_w: usize,
    pub flip: bool,
    pub brightness: f64,
}

impl AugmentParams {
    pub fn sample(height: usize, width: usize, kind: CropKind, family: &AugmentationFamily, rng: &mut impl Rng) -> Self {
        let (lo, hi) = match kind {
            CropKind::Global => family.global_scale,
            CropKind::Local => family.local_scale,
        };
        let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let side = |extent: usize| ((scale.sqrt() * extent as f64).round() as usize).clamp(1, extent);
        let (side_h, side_w) = (side(height), side(width));
        let top = rng.random_range(0..=height - side_h);
        let left = rng.random_range(0..=width - side_w);
        let flip = family.flip_prob > 0.0 && rng.random::<f64>() < family.flip_prob;
        let brightness = if family.brightness > 0.0 {
            rng.random_range(-family.brightness..=family.brightness)
        } else {
            0.0
        };
        AugmentParams { top, left, side_h, side_w, flip, brightness }
    }
}

/// Bilinear source coordinate for output index `i` when stretching `side` pixels over `out`.
fn source(i: usize, side: usize, out: usize, offset: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * side as f64 / out as f64 - 0.5).clamp(0.0, (side - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(side - 1);
    (offset + lo, offset + hi, s - lo as f64)
}

/// One augmented view of an 8-bit `H × W × C` image, as reals in `[0, 1]`.
pub fn augment(
    image: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    kind: CropKind,
    family: &AugmentationFamily,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let p = AugmentParams::sample(height, width, kind, family, rng);
    let px = |y: usize, x: usize, c: usize| image[(y * width + x) * channels + c] as f64 / 255.0;
    let noise = Normal::new(0.0, family.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut out = Vec::with_capacity(height * width * channels);
    for i in 0..height {
        let (y0, y1, fy) = source(i, p.side_h, height, p.top);
        for j in 0..width {
            let jj = if p.flip { width - 1 - j } else { j };
            let (x0, x1, fx) = source(jj, p.side_w, width, p.left);
            for c in 0..channels {
                let mut v = if fy == 0.0 && fx == 0.0 {
                    px(y0, x0, c)
                } else {
                    let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                    let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                    top * (1.0 - fy) + bottom * fy
                };
                v += p.brightness;
                if family.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ramp() -> Vec<u8> {
        (0..16 * 16).map(|i| (i * 7 % 256) as u8).collect()
    }

    #[test]
    fn identity_family_returns_normalized_image() {
        let img = ramp();
        let mut r = stream(0, &[]);
        let v = augment(&img, 16, 16, 1, CropKind::Global, &AugmentationFamily::identity(), &mut r);
        let want: Vec<f64> = img.iter().map(|&p| p as f64 / 255.0).collect();
        assert_eq!(v, want);
    }

    #[test]
    fn output_shape_and_range() {
        let img = ramp();
        let fam = AugmentationFamily::default();
        for seed in 0..50 {
            let mut r = stream(seed, &[]);
            for kind in [CropKind::Global, CropKind::Local] {
                let v = augment(&img, 16, 16, 1, kind, &fam, &mut r);
                assert_eq!(v.len(), 256);
                assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
        let rgb: Vec<u8> = (0..8 * 8 * 3).map(|i| i as u8).collect();
        let mut r = stream(1, &[]);
        assert_eq!(augment(&rgb, 8, 8, 3, CropKind::Local, &fam, &mut r).len(), 192);
    }

    #[test]
    fn different_streams_give_different_views() {
        let img = ramp();
        let fam = AugmentationFamily::default();
        let a = augment(&img, 16, 16, 1, CropKind::Global, &fam, &mut stream(1, &[]));
        let b = augment(&img, 16, 16, 1, CropKind::Global, &fam, &mut stream(2, &[]));
        let mad = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(mad > 0.0);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = ramp();
        let fam = AugmentationFamily { flip_prob: 1.0, ..AugmentationFamily::identity() };
        let v = augment(&img, 16, 16, 1, CropKind::Global, &fam, &mut stream(0, &[]));
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(v[i * 16 + j], img[i * 16 + 15 - j] as f64 / 255.0);
            }
        }
    }

    #[test]
    fn crop_sizes_follow_kind() {
        let fam = AugmentationFamily::default();
        let mut r = stream(5, &[]);
        for _ in 0..200 {
            let g = AugmentParams::sample(16, 16, CropKind::Global, &fam, &mut r);
            let l = AugmentParams::sample(16, 16, CropKind::Local, &fam, &mut r);
            assert!(g.side_h >= 11 && g.side_h <= 16);
            assert!(l.side_h >= 6 && l.side_h <= 11);
            assert!(g.top + g.side_h <= 16 && l.left + l.side_w <= 16);
        }
    }
}
