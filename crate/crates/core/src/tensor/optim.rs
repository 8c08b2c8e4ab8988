use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Param, ParamId};
use crate::error::{invalid, shape_err, Result};
use crate::instrument;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// One momentum step with L2 decay folded into the gradient:
/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
pub fn sgd_step(w: &mut [f32], g: &[f32], v: &mut [f32], cfg: &SgdConfig) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return shape_err(format!(
            "sgd_step lengths w={} g={} v={}",
            w.len(),
            g.len(),
            v.len()
        ));
    }
    for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *wi);
        *wi -= cfg.learning_rate * *vi;
    }
    instrument::note_optimizer_step();
    Ok(())
}

/// Momentum SGD holding one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: HashMap<ParamId, Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.cfg.learning_rate = lr;
    }

    /// Updates every parameter that received a gradient; others are left alone.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, grads: &Gradients) -> Result<()> {
        for p in params {
            let Some(g) = grads.param(p.id()) else { continue };
            if g.shape() != p.value.shape() {
                return shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.value.shape()));
            }
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| vec![0.0; g.len()]);
            sgd_step(p.value.data_mut(), g.data(), v, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_descent_without_momentum_or_decay() {
        let cfg = SgdConfig { learning_rate: 0.5, momentum: 0.0, weight_decay: 0.0 };
        let mut w = [1.0, -2.0];
        let mut v = [0.0, 0.0];
        sgd_step(&mut w, &[0.2, 0.4], &mut v, &cfg).unwrap();
        assert_eq!(w, [0.9, -2.2]);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut w = [1.0f32];
        let mut v = [0.0f32];
        sgd_step(&mut w, &[1.0], &mut v, &cfg).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-7 && (w[0] - 0.9).abs() < 1e-7);
        sgd_step(&mut w, &[1.0], &mut v, &cfg).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-6 && (w[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let cfg = SgdConfig { learning_rate: 1.0, momentum: 0.0, weight_decay: 5e-4 };
        let mut w = [2.0f32];
        let mut v = [0.0f32];
        sgd_step(&mut w, &[0.0], &mut v, &cfg).unwrap();
        assert!((w[0] - (2.0 - 1e-3)).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = SgdConfig::default();
        assert!(sgd_step(&mut [1.0], &[1.0, 2.0], &mut [0.0], &cfg).is_err());
    }

    #[test]
    fn plain_descent_decreases_a_convex_quadratic() {
        // f(w) = ‖w‖², ∇f = 2w
        let cfg = SgdConfig { learning_rate: 0.01, momentum: 0.0, weight_decay: 0.0 };
        let mut w = [0.7f32, -1.3, 2.1];
        let mut v = [0.0f32; 3];
        let f = |w: &[f32]| w.iter().map(|x| x * x).sum::<f32>();
        let mut prev = f(&w);
        for _ in 0..100 {
            let g: Vec<f32> = w.iter().map(|x| 2.0 * x).collect();
            sgd_step(&mut w, &g, &mut v, &cfg).unwrap();
            let cur = f(&w);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
