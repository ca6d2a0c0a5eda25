use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Class-conditional bright-patch images on a noisy background.
///
/// The image is divided into a 4×4 grid of patch locations. Each class owns
/// `planted_bits` of them; an example lights each of its class's patches with
/// probability `patch_prob` and every other location with `distractor_prob`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub planted_bits: usize,
    pub noise: f64,
    pub patch_prob: f64,
    pub distractor_prob: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            num_classes: 3,
            n_per_class: 200,
            image_size: 16,
            planted_bits: 3,
            noise: 20.0,
            patch_prob: 0.9,
            distractor_prob: 0.1,
        }
    }
}

const GRID: usize = 4;
const BACKGROUND: f64 = 40.0;
const BRIGHT: f64 = 200.0;

/// Grid cells owned by each class, as indices into the 4×4 grid.
pub fn patch_locations(spec: &BlobSpec, seed: u64) -> Result<Vec<Vec<usize>>> {
    let cells = GRID * GRID;
    if spec.num_classes < 2 {
        return Err(Error::Parameter("synthetic blobs need at least 2 classes".into()));
    }
    if spec.planted_bits == 0 || spec.planted_bits >= cells {
        return Err(Error::Parameter(format!("planted_bits must lie in [1, {}), got {}", cells, spec.planted_bits)));
    }
    if spec.image_size < GRID || spec.image_size % GRID != 0 {
        return Err(Error::Parameter(format!("image size must be a positive multiple of {GRID}")));
    }
    let mut r = rng::stream(seed, &[rng::purpose::DATASET, 0]);
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut r);
    if spec.num_classes * spec.planted_bits <= cells {
        return Ok(order.chunks(spec.planted_bits).take(spec.num_classes).map(|c| sorted(c.to_vec())).collect());
    }
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for _ in 0..10_000 {
        if sets.len() == spec.num_classes {
            break;
        }
        order.shuffle(&mut r);
        let s = sorted(order[..spec.planted_bits].to_vec());
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    if sets.len() < spec.num_classes {
        return Err(Error::Parameter("not enough distinct patch sets for this many classes".into()));
    }
    Ok(sets)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Pure function of `(spec, seed)`. Labels cycle through the classes.
pub fn make_synthetic_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    let locations = patch_locations(spec, seed)?;
    if spec.n_per_class == 0 || spec.noise < 0.0 {
        return Err(Error::Parameter("need n_per_class > 0 and noise >= 0".into()));
    }
    let s = spec.image_size;
    let patch = s / GRID;
    let n = spec.num_classes * spec.n_per_class;
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut pixels = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.num_classes;
        let mut r = rng::stream(seed, &[rng::purpose::DATASET, 1, i as u64]);
        let mut img: Vec<f64> = (0..s * s).map(|_| BACKGROUND + normal.sample(&mut r)).collect();
        for cell in 0..GRID * GRID {
            let p = if locations[label].contains(&cell) { spec.patch_prob } else { spec.distractor_prob };
            if r.random::<f64>() >= p {
                continue;
            }
            let dy = r.random_range(-1i64..=1);
            let dx = r.random_range(-1i64..=1);
            let y0 = ((cell / GRID * patch) as i64 + dy).clamp(0, (s - patch) as i64) as usize;
            let x0 = ((cell % GRID * patch) as i64 + dx).clamp(0, (s - patch) as i64) as usize;
            for y in y0..y0 + patch {
                for x in x0..x0 + patch {
                    img[y * s + x] = BRIGHT + normal.sample(&mut r);
                }
            }
        }
        pixels.extend(img.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        labels.push(label);
    }
    Dataset::new(s, s, 1, spec.num_classes, pixels, labels, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stratified_split;

    fn nearest_centroid_accuracy(data: &Dataset, labels: &[usize], train: &[usize], test: &[usize]) -> f64 {
        let per = data.pixels_per_image();
        let mut centroids = vec![vec![0.0; per]; data.num_classes];
        let mut counts = vec![0.0; data.num_classes];
        for &i in train {
            counts[labels[i]] += 1.0;
            for (c, &p) in centroids[labels[i]].iter_mut().zip(data.image(i)) {
                *c += p as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let correct = test
            .iter()
            .filter(|&&i| {
                let dist = |c: &Vec<f64>| c.iter().zip(data.image(i)).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
                let best = (0..data.num_classes)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == labels[i]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = BlobSpec { n_per_class: 10, ..BlobSpec::default() };
        assert_eq!(make_synthetic_blobs(&spec, 4).unwrap(), make_synthetic_blobs(&spec, 4).unwrap());
        assert_ne!(make_synthetic_blobs(&spec, 4).unwrap(), make_synthetic_blobs(&spec, 5).unwrap());
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let data = make_synthetic_blobs(&BlobSpec::default(), 0).unwrap();
        let (train, test) = stratified_split(&data.labels, 0.25, 0).unwrap();
        let acc = nearest_centroid_accuracy(&data, &data.labels, &train, &test);
        assert!(acc > 0.95, "{acc}");

        let mut shuffled = data.labels.clone();
        shuffled.shuffle(&mut rng::stream(1, &[]));
        let chance = nearest_centroid_accuracy(&data, &shuffled, &train, &test);
        assert!((chance - 1.0 / 3.0).abs() < 0.15, "{chance}");
    }

    #[test]
    fn class_patch_sets_are_distinct() {
        for (classes, bits) in [(3, 3), (5, 4), (10, 2)] {
            let spec = BlobSpec { num_classes: classes, planted_bits: bits, ..BlobSpec::default() };
            let sets = patch_locations(&spec, 9).unwrap();
            assert_eq!(sets.len(), classes);
            for i in 0..classes {
                assert_eq!(sets[i].len(), bits);
                for j in 0..i {
                    assert_ne!(sets[i], sets[j]);
                }
            }
        }
        assert!(patch_locations(&BlobSpec { num_classes: 1, ..BlobSpec::default() }, 0).is_err());
    }
}
