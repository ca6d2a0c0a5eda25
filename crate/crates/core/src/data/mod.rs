//! Datasets, augmentation, view generation and splitting.

mod augment;
mod format;
mod split;
mod synthetic;

pub use augment::{augment, AugmentParams, AugmentationFamily, CropKind};
pub use format::{read_scds, write_scds, SCDS_MAGIC, SCDS_VERSION};
pub use split::{stratified_kfold, stratified_split};
pub use synthetic::{make_synthetic_blobs, patch_locations, BlobSpec};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ViewLayout;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// 8-bit images in `N × H × W × C` order with integer labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || num_classes == 0 {
            return Err(Error::Format("dataset dimensions must be positive".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} pixel bytes do not match {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset { height, width, channels, num_classes, pixels, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.pixels_per_image();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let pixels = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { pixels, labels, split, ..self.clone() }
    }

    /// Un-augmented images scaled to `[0, 1]`, one row per image.
    pub fn normalized(&self, indices: &[usize]) -> Tensor {
        let per = self.pixels_per_image();
        let data = indices.iter().flat_map(|&i| self.image(i).iter().map(|&p| p as f64 / 255.0)).collect();
        Tensor::matrix(indices.len(), per, data).expect("consistent dimensions")
    }

    pub fn all_normalized(&self) -> Tensor {
        self.normalized(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Augmented views of `indices` in view-major row order
/// (`row = view * indices.len() + position`). Image `i` draws its views
/// from its own stream keyed by `(seed, step, i)`, so results do not depend
/// on the number of worker threads.
pub fn make_views(
    data: &Dataset,
    indices: &[usize],
    layout: &ViewLayout,
    family: &AugmentationFamily,
    seed: u64,
    step: u64,
) -> Result<Tensor> {
    if indices.len() != layout.n_images {
        return Err(Error::Dimension(format!(
            "layout expects {} images, got {}",
            layout.n_images,
            indices.len()
        )));
    }
    let per = data.pixels_per_image();
    let views = layout.views();
    let per_image: Vec<Vec<Vec<f64>>> = indices
        .par_iter()
        .map(|&i| {
            let mut r = rng::stream(seed, &[rng::purpose::VIEWS, step, i as u64]);
            (0..views)
                .map(|v| {
                    let kind = if layout.is_global(v) { CropKind::Global } else { CropKind::Local };
                    augment(data.image(i), data.height, data.width, data.channels, kind, family, &mut r)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(views * indices.len() * per);
    for v in 0..views {
        for img in &per_image {
            out.extend_from_slice(&img[v]);
        }
    }
    Tensor::matrix(views * indices.len(), per, out)
}
