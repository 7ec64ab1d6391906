//! Dataset ingestion: IDX parsing/writing, synthetic generation, batching.

pub mod idx;
pub mod synthetic;

pub use idx::{
    encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, read_idx_images,
    read_idx_labels, write_idx_images, write_idx_labels, IdxImages, IdxLabels,
};
pub use synthetic::{synthetic_dataset, SyntheticSpec};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use std::path::Path;

/// Normalized labeled image set: images `[N,1,H,W]` in f32, labels as class
/// indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    /// Scales pixels to [0,1] and applies `(x - mean) / std`.
    pub fn from_idx(images: &IdxImages, labels: &IdxLabels, mean: f32, std: f32) -> Result<Self> {
        if images.n != labels.0.len() {
            return Err(Error::Format(format!(
                "IDX pair mismatch: {} images but {} labels",
                images.n,
                labels.0.len()
            )));
        }
        if std <= 0.0 {
            return Err(Error::Domain(format!("normalization std must be positive, got {std}")));
        }
        let data: Vec<f32> = images.pixels.iter().map(|&p| (p as f32 / 255.0 - mean) / std).collect();
        let tensor = Tensor::new(vec![images.n, 1, images.rows, images.cols], data)?;
        let labels: Vec<usize> = labels.0.iter().map(|&l| l as usize).collect();
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Dataset { images: tensor, labels, classes })
    }

    pub fn load(images_path: &Path, labels_path: &Path, mean: f32, std: f32) -> Result<Self> {
        let images = read_idx_images(images_path)?;
        let labels = read_idx_labels(labels_path)?;
        Self::from_idx(&images, &labels, mean, std)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers the samples at `indices` into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let sample = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![indices.len(), c, h, w], data).unwrap(), labels)
    }

    pub fn take(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset { images, labels, classes: self.classes }
    }

    /// Seeded stratified subset: about `frac` of each class, preserving
    /// within-class order of the shuffled picks.
    pub fn stratified_subset(&self, frac: f64, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed, Stream::Data);
        let mut picked = Vec::new();
        for class in 0..self.classes {
            let mut members: Vec<usize> =
                (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            rng.shuffle(&mut members);
            let keep = ((members.len() as f64 * frac).round() as usize).max(1).min(members.len());
            picked.extend_from_slice(&members[..keep]);
        }
        picked.sort_unstable();
        self.take(&picked)
    }
}

/// Generates the train/test pair from one seeded stream (train first).
pub fn synthetic_train_test(
    seed: u64,
    spec_train: &SyntheticSpec,
    test_n: usize,
    mean: f32,
    std: f32,
) -> Result<(Dataset, Dataset)> {
    let mut rng = Rng::new(seed, Stream::Data);
    let (ti, tl) = synthetic_dataset(&mut rng, spec_train);
    let test_spec = SyntheticSpec { n: test_n, ..*spec_train };
    let (vi, vl) = synthetic_dataset(&mut rng, &test_spec);
    Ok((Dataset::from_idx(&ti, &tl, mean, std)?, Dataset::from_idx(&vi, &vl, mean, std)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_count_mismatch_is_an_error() {
        let images = IdxImages { n: 2, rows: 2, cols: 2, pixels: vec![0; 8] };
        let labels = IdxLabels(vec![1]);
        assert!(Dataset::from_idx(&images, &labels, 0.0, 1.0).is_err());
    }

    #[test]
    fn stratified_subset_keeps_all_classes() {
        let spec = SyntheticSpec::default_preset(10, 200);
        let (imgs, labels) = synthetic_dataset(&mut Rng::new(2, Stream::Data), &spec);
        let ds = Dataset::from_idx(&imgs, &labels, 0.0, 1.0).unwrap();
        let sub = ds.stratified_subset(0.1, 7);
        assert_eq!(sub.len(), 20);
        for class in 0..10 {
            assert!(sub.labels.contains(&class));
        }
        // Deterministic.
        let again = ds.stratified_subset(0.1, 7);
        assert_eq!(sub.labels, again.labels);
    }

    #[test]
    fn batch_gathers_rows() {
        let spec = SyntheticSpec::default_preset(2, 6);
        let (imgs, labels) = synthetic_dataset(&mut Rng::new(2, Stream::Data), &spec);
        let ds = Dataset::from_idx(&imgs, &labels, 0.0, 1.0).unwrap();
        let (batch, lab) = ds.batch(&[1, 3]);
        assert_eq!(batch.shape(), &[2, 1, 28, 28]);
        assert_eq!(lab, vec![ds.labels[1], ds.labels[3]]);
    }
}
