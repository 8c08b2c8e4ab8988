use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{PoeError, Result};
use crate::task::{PrimitiveTask, TaskUniverse};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;
/// Coarse label, fine label, pixels.
pub const CIFAR100_RECORD: usize = 2 + PIXELS;
/// Label, pixels.
pub const CIFAR10_RECORD: usize = 1 + PIXELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => CIFAR10_RECORD,
            CifarVariant::Cifar100 => CIFAR100_RECORD,
        }
    }

    fn files(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            CifarVariant::Cifar10 => (
                &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
                &["test_batch.bin"],
            ),
            CifarVariant::Cifar100 => (&["train.bin"], &["test.bin"]),
        }
    }

    fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Raw records: `(coarse, fine)` labels and CHW pixels scaled to `[0, 1]`.
/// CIFAR-10 records report their single label as both.
pub fn parse_records(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<(usize, usize)>, Vec<f32>)> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(PoeError::Dataset(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for r in bytes.chunks_exact(rec) {
        let (lab, px) = r.split_at(rec - PIXELS);
        let (coarse, fine) = match variant {
            CifarVariant::Cifar10 => (lab[0] as usize, lab[0] as usize),
            CifarVariant::Cifar100 => (lab[0] as usize, lab[1] as usize),
        };
        if fine >= variant.num_classes() {
            return Err(PoeError::Dataset(format!("label {fine} out of range")));
        }
        labels.push((coarse, fine));
        pixels.extend(px.iter().map(|&b| b as f32 / 255.0));
    }
    Ok((labels, pixels))
}

fn read_split(dir: &Path, files: &[&str], variant: CifarVariant) -> Result<(Vec<(usize, usize)>, Vec<f32>)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| PoeError::Dataset(format!("{}: {e}", path.display())))?;
        let (l, p) = parse_records(&bytes, variant)?;
        labels.extend(l);
        pixels.extend(p);
    }
    Ok((labels, pixels))
}

fn label_names(dir: &Path, variant: CifarVariant) -> Vec<String> {
    let file = match variant {
        CifarVariant::Cifar10 => "batches.meta.txt",
        CifarVariant::Cifar100 => "fine_label_names.txt",
    };
    let names: Vec<String> = fs::read_to_string(dir.join(file))
        .map(|s| s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    if names.len() == variant.num_classes() {
        names
    } else {
        (0..variant.num_classes()).map(|i| format!("class{i:02}")).collect()
    }
}

/// Loads a CIFAR binary distribution. With `superclasses` (CIFAR-100 only) the
/// classes are the fine classes of those superclasses, grouped in the given
/// order, and each superclass becomes one primitive task; otherwise every
/// class is its own task.
pub fn load_cifar(
    dir: &Path,
    variant: CifarVariant,
    superclasses: Option<&[usize]>,
) -> Result<(Dataset, Dataset, TaskUniverse)> {
    let (train_files, eval_files) = variant.files();
    let (train_labels, train_px) = read_split(dir, train_files, variant)?;
    let (eval_labels, eval_px) = read_split(dir, eval_files, variant)?;
    let names = label_names(dir, variant);

    // Groups of fine classes, one group per task.
    let groups: Vec<(String, Vec<usize>)> = match superclasses {
        Some(keep) => {
            if variant != CifarVariant::Cifar100 {
                return Err(PoeError::Dataset("superclass restriction needs CIFAR-100".into()));
            }
            keep.iter()
                .map(|&sc| {
                    let mut fine: Vec<usize> = train_labels.iter().filter(|l| l.0 == sc).map(|l| l.1).collect();
                    fine.sort_unstable();
                    fine.dedup();
                    if fine.is_empty() {
                        return Err(PoeError::Dataset(format!("superclass {sc} has no samples")));
                    }
                    Ok((format!("superclass{sc:02}"), fine))
                })
                .collect::<Result<_>>()?
        }
        None => (0..variant.num_classes()).map(|c| (names[c].clone(), vec![c])).collect(),
    };

    let order: Vec<usize> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let mut dense = vec![None; variant.num_classes()];
    for (j, &fine) in order.iter().enumerate() {
        dense[fine] = Some(j);
    }
    let mut start = 0;
    let primitives = groups
        .iter()
        .enumerate()
        .map(|(i, (name, fine))| {
            let t = PrimitiveTask {
                id: format!("t{i}"),
                name: name.clone(),
                class_indices: (start..start + fine.len()).collect(),
            };
            start += fine.len();
            t
        })
        .collect();
    let universe = TaskUniverse::new(order.iter().map(|&f| names[f].clone()).collect(), primitives)?;

    let build = |labels: &[(usize, usize)], px: &[f32]| -> Result<Dataset> {
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| dense[labels[i].1].is_some()).collect();
        let mut data = Vec::with_capacity(keep.len() * PIXELS);
        for &i in &keep {
            data.extend_from_slice(&px[i * PIXELS..(i + 1) * PIXELS]);
        }
        let y = keep.iter().map(|&i| dense[labels[i].1].expect("kept")).collect();
        Dataset::new(Tensor::new(vec![keep.len(), 3, 32, 32], data)?, y, order.len())
    };
    Ok((build(&train_labels, &train_px)?, build(&eval_labels, &eval_px)?, universe))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record100(coarse: u8, fine: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend(std::iter::repeat_n(fill, PIXELS));
        r
    }

    #[test]
    fn record_arithmetic() {
        assert_eq!(CIFAR100_RECORD, 3074);
        assert_eq!(CIFAR10_RECORD, 3073);
        let bytes: Vec<u8> = (0..5).flat_map(|i| record100(i, 10 + i, 255)).collect();
        let (labels, px) = parse_records(&bytes, CifarVariant::Cifar100).unwrap();
        assert_eq!(labels.len(), 5);
        assert_eq!(labels[3], (3, 13));
        assert_eq!(px.len(), 5 * 3072);
        assert_eq!(px[0], 1.0);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut bytes = record100(0, 0, 0);
        bytes.pop();
        assert!(matches!(parse_records(&bytes, CifarVariant::Cifar100), Err(PoeError::Dataset(_))));
    }

    #[test]
    fn superclass_restriction_builds_tasks() {
        let dir = tempfile::tempdir().unwrap();
        // superclass 1 → fine {5, 7}, superclass 4 → fine {2}, superclass 9 → fine {40}
        let mut train = Vec::new();
        for (c, f) in [(1, 7), (4, 2), (1, 5), (9, 40), (1, 7)] {
            train.extend(record100(c, f, 0));
        }
        fs::write(dir.path().join("train.bin"), &train).unwrap();
        fs::write(dir.path().join("test.bin"), record100(4, 2, 0)).unwrap();
        let (tr, ev, u) = load_cifar(dir.path(), CifarVariant::Cifar100, Some(&[4, 1])).unwrap();
        assert_eq!(u.primitives[0].class_indices, vec![0]);
        assert_eq!(u.primitives[1].class_indices, vec![1, 2]);
        assert_eq!(tr.labels, vec![2, 0, 1, 2]);
        assert_eq!(ev.labels, vec![0]);
        assert_eq!(tr.shape().dims(), [3, 32, 32]);
    }
}
