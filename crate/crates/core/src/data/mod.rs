//! Labelled image sets, their sources, and per-channel normalization.

mod cifar;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{PoeError, Result};
use crate::netzoo::InputShape;
use crate::task::TaskUniverse;
use crate::tensor::Tensor;

pub use cifar::{load_cifar, parse_records, CifarVariant, CIFAR100_RECORD, CIFAR10_RECORD};
pub use synth::{generate, SynthConfig};

/// Images `[N, C, H, W]` with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(PoeError::Dataset(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(PoeError::Dataset(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        let s = self.images.shape();
        InputShape::new(s[1], s[2], s[3])
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Rows whose label is in `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }

    /// Keeps rows labelled in `classes` and relabels them densely: the label
    /// of `classes[j]` becomes `j`.
    pub fn restrict(&self, classes: &[usize]) -> Result<Dataset> {
        if classes.is_empty() {
            return Err(PoeError::Dataset("restriction to an empty class set".into()));
        }
        let idx = self.indices_of(classes);
        let mut out = self.subset(&idx);
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered above");
        }
        out.num_classes = classes.len();
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Statistics of `data`'s images, accumulated in f64.
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(PoeError::Dataset("cannot normalize an empty split".into()));
        }
        let s = data.shape();
        let plane = s.height * s.width;
        let mut sum = vec![0.0f64; s.channels];
        let mut sq = vec![0.0f64; s.channels];
        for sample in data.images.data().chunks(s.numel()) {
            for (c, ch) in sample.chunks(plane).enumerate() {
                for &v in ch {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (data.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        self.apply_images(&mut data.images)
    }

    /// Normalizes an `[N, C, H, W]` batch in place.
    pub fn apply_images(&self, images: &mut Tensor) -> Result<()> {
        if images.rank() != 4 || images.dim(1) != self.mean.len() {
            return Err(PoeError::Shape(format!(
                "normalization for {} channels applied to {:?}",
                self.mean.len(),
                images.shape()
            )));
        }
        let plane = images.dim(2) * images.dim(3);
        let numel = plane * images.dim(1);
        if numel == 0 {
            return Ok(());
        }
        for sample in images.data_mut().chunks_mut(numel) {
            for (c, ch) in sample.chunks_mut(plane).enumerate() {
                for v in ch {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
        Ok(())
    }
}

/// Where a train/eval pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    CifarBinary {
        dir: PathBuf,
        variant: CifarVariant,
        /// CIFAR-100 only: keep these superclasses; each becomes a primitive task.
        #[serde(default)]
        superclasses: Option<Vec<usize>>,
    },
}

/// Normalized train and eval splits with the task partition of their labels.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub universe: TaskUniverse,
    pub normalization: Normalization,
}

impl DatasetSource {
    /// Loads both splits, fits normalization on the training split and
    /// applies it to both.
    pub fn load(&self) -> Result<Splits> {
        let (mut train, mut eval, universe) = match self {
            DatasetSource::Synthetic(cfg) => generate(cfg)?,
            DatasetSource::CifarBinary { dir, variant, superclasses } => {
                load_cifar(dir, *variant, superclasses.as_deref())?
            }
        };
        let normalization = Normalization::fit(&train)?;
        normalization.apply(&mut train)?;
        normalization.apply(&mut eval)?;
        Ok(Splits { train, eval, universe, normalization })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::new(vec![4, 2, 1, 2], vec![0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12., 13., 14., 15.]).unwrap();
        Dataset::new(images, vec![0, 2, 1, 2], 3).unwrap()
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        let images = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(Dataset::new(images, vec![0, 3], 3).is_err());
    }

    #[test]
    fn restrict_remaps_densely_in_given_order() {
        let d = tiny().restrict(&[2, 0]).unwrap();
        assert_eq!(d.labels, vec![1, 0, 0]);
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.images.dim(0), 3);
    }

    #[test]
    fn normalization_zeroes_mean_and_unit_std() {
        let mut d = tiny();
        let norm = Normalization::fit(&d).unwrap();
        norm.apply(&mut d).unwrap();
        let again = Normalization::fit(&d).unwrap();
        for (m, s) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn source_json_is_tagged_by_format() {
        let src = DatasetSource::Synthetic(SynthConfig::default());
        let v = serde_json::to_value(&src).unwrap();
        assert_eq!(v["format"], "synthetic");
        let back: DatasetSource = serde_json::from_value(v).unwrap();
        assert_eq!(back, src);
    }
}
