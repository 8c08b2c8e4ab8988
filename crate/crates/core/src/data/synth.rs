use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{PoeError, Result};
use crate::rng::{self, Rng};
use crate::task::TaskUniverse;
use crate::tensor::Tensor;

/// Images built from a per-task prototype plus a per-class pattern, randomly
/// shifted and corrupted by pixel noise. Tasks are coarse groups; classes
/// inside a task differ only by their fainter pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub task_strength: f32,
    pub class_strength: f32,
    pub noise: f32,
    /// Largest circular shift, in pixels, along each axis.
    pub max_shift: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 24,
            classes_per_task: 4,
            train_per_class: 60,
            eval_per_class: 40,
            image_size: 8,
            channels: 3,
            task_strength: 1.0,
            class_strength: 0.6,
            noise: 0.6,
            max_shift: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PoeError::Dataset(m));
        if self.num_classes == 0 || self.classes_per_task == 0 || !self.num_classes.is_multiple_of(self.classes_per_task) {
            return bad(format!("{} classes do not split into tasks of {}", self.num_classes, self.classes_per_task));
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return bad("every class needs train and eval samples".into());
        }
        if self.image_size < 4 || self.channels == 0 {
            return bad(format!("image {}x{}x{} is too small", self.channels, self.image_size, self.image_size));
        }
        if !(self.noise >= 0.0 && self.task_strength >= 0.0 && self.class_strength >= 0.0) {
            return bad("strengths and noise must be nonnegative".into());
        }
        Ok(())
    }
}

/// Zero-mean, unit-variance field with neighbouring pixels correlated.
fn smooth_field(rng: &mut Rng, c: usize, s: usize) -> Vec<f32> {
    let raw: Vec<f32> = (0..c * s * s).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let mut out = vec![0.0f32; raw.len()];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for dy in [s - 1, 0, 1] {
                    for dx in [s - 1, 0, 1] {
                        acc += raw[ch * s * s + ((y + dy) % s) * s + (x + dx) % s];
                    }
                }
                out[ch * s * s + y * s + x] = acc;
            }
        }
    }
    let mean = out.iter().sum::<f32>() / out.len() as f32;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / out.len() as f32;
    let inv = 1.0 / var.sqrt().max(1e-6);
    out.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    out
}

/// Train split, eval split, and the task partition, all fixed by `cfg.seed`.
/// Pixel values lie in `[0, 1]`.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset, TaskUniverse)> {
    cfg.validate()?;
    let (c, s) = (cfg.channels, cfg.image_size);
    let numel = c * s * s;
    let mut rng = rng::stream(cfg.seed, rng::streams::DATA);
    let tasks = cfg.num_classes / cfg.classes_per_task;
    let task_proto: Vec<Vec<f32>> = (0..tasks).map(|_| smooth_field(&mut rng, c, s)).collect();
    let class_pattern: Vec<Vec<f32>> = (0..cfg.num_classes).map(|_| smooth_field(&mut rng, c, s)).collect();

    let mut draw = |per_class: usize| -> Result<Dataset> {
        let n = per_class * cfg.num_classes;
        let mut data = Vec::with_capacity(n * numel);
        let mut labels = Vec::with_capacity(n);
        for class in 0..cfg.num_classes {
            let proto = &task_proto[class / cfg.classes_per_task];
            let pattern = &class_pattern[class];
            for _ in 0..per_class {
                let span = 2 * cfg.max_shift + 1;
                let dy = rng.gen_range(0..span) + s - cfg.max_shift;
                let dx = rng.gen_range(0..span) + s - cfg.max_shift;
                for ch in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            let src = ch * s * s + ((y + dy) % s) * s + (x + dx) % s;
                            let signal = cfg.task_strength * proto[src] + cfg.class_strength * pattern[src];
                            let noise = cfg.noise * rng.sample::<f32, _>(StandardNormal);
                            data.push((0.5 + 0.2 * (signal + noise)).clamp(0.0, 1.0));
                        }
                    }
                }
                labels.push(class);
            }
        }
        Dataset::new(Tensor::new(vec![n, c, s, s], data)?, labels, cfg.num_classes)
    };
    let train = draw(cfg.train_per_class)?;
    let eval = draw(cfg.eval_per_class)?;
    let universe = TaskUniverse::uniform(cfg.num_classes, cfg.classes_per_task)?;
    Ok((train, eval, universe))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig { num_classes: 20, classes_per_task: 5, train_per_class: 100, ..Default::default() };
        let (a, _, _) = generate(&cfg).unwrap();
        let (b, _, _) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2000);
        let (c, _, _) = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn pixels_in_unit_range_and_classes_balanced() {
        let (train, eval, u) = generate(&SynthConfig::default()).unwrap();
        assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(train.class_counts().iter().all(|&n| n == 60));
        assert!(eval.class_counts().iter().all(|&n| n == 40));
        assert_eq!(u.primitives.len(), 6);
    }

    #[test]
    fn indivisible_partition_is_rejected() {
        assert!(generate(&SynthConfig { num_classes: 10, classes_per_task: 4, ..Default::default() }).is_err());
    }
}
