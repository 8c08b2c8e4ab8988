use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{BatchStats, Param, ParamId, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
/// Running statistics keep this fraction of their old value per batch.
pub const BN_MOMENTUM: f32 = 0.9;

/// A stored tensor as seen by a visitor.
pub enum Slot<'a> {
    Param(&'a Param),
    Buffer(&'a Tensor),
}

pub enum SlotMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Tensor),
}

impl Slot<'_> {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(t) => t,
        }
    }
}

impl SlotMut<'_> {
    pub fn tensor_mut(&mut self) -> &mut Tensor {
        match self {
            SlotMut::Param(p) => &mut p.value,
            SlotMut::Buffer(t) => t,
        }
    }
}

/// Anything holding parameters and buffers under stable dotted names.
/// Visiting order is fixed and is the serialization order.
pub trait Visit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>));

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<*mut Param> = Vec::new();
        self.visit_mut("", &mut |_, s| {
            if let SlotMut::Param(p) = s {
                out.push(p as *mut Param);
            }
        });
        // SAFETY: each pointer comes from a distinct field reached through
        // the single `&mut self` borrow, which outlives the returned references.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Forward-pass context: the tape plus mode flags and the batch statistics
/// gathered by training-mode batch norms (keyed by their scale parameter).
pub struct Fwd<'t> {
    pub tape: &'t mut Tape,
    /// Batch statistics instead of running statistics.
    pub train: bool,
    /// Parameters enter the tape as gradient leaves.
    pub trainable: bool,
    pub stats: HashMap<ParamId, BatchStats>,
}

impl<'t> Fwd<'t> {
    pub fn train(tape: &'t mut Tape) -> Self {
        Self { tape, train: true, trainable: true, stats: HashMap::new() }
    }

    pub fn eval(tape: &'t mut Tape) -> Self {
        Self { tape, train: false, trainable: false, stats: HashMap::new() }
    }

    fn param(&mut self, p: &Param) -> Result<Var> {
        self.tape.param(p, self.trainable)
    }
}

fn kaiming(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::new(kaiming(rng, &[out_ch, in_ch, k, k], in_ch * k * k)),
            stride,
            pad: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dim(2)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        ((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1)
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight)?;
        cx.tape.conv2d(x, w, self.stride, self.pad)
    }

    /// Multiply-accumulates for an `h×w` input (per sample).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel();
        (self.out_channels() * self.in_channels() * k * k * ho * wo) as u64
    }
}

impl Visit for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&self.weight));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let g = cx.param(&self.gamma)?;
        let b = cx.param(&self.beta)?;
        if cx.train {
            let (y, stats) = cx.tape.batch_norm(x, g, b, None, BN_EPS)?;
            if let Some(stats) = stats {
                cx.stats.insert(self.gamma.id(), stats);
            }
            Ok(y)
        } else {
            let running = Some((self.running_mean.data(), self.running_var.data()));
            Ok(cx.tape.batch_norm(x, g, b, running, BN_EPS)?.0)
        }
    }

    /// Folds one batch of statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let keep = BN_MOMENTUM;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + (1.0 - keep) * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + (1.0 - keep) * b;
        }
    }
}

impl Visit for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "gamma"), Slot::Param(&self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "gamma"), SlotMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), SlotMut::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), SlotMut::Buffer(&mut self.running_var));
    }
}

/// Fully connected layer; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::new(kaiming(rng, &[in_f, out_f], in_f)),
            bias: Param::new(Tensor::zeros(&[out_f])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight)?;
        let b = cx.param(&self.bias)?;
        let y = cx.tape.matmul(x, w)?;
        cx.tape.add_bias(y, b)
    }

    pub fn macs(&self) -> u64 {
        (self.in_features() * self.out_features()) as u64
    }
}

impl Visit for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&self.weight));
        f(&join(prefix, "bias"), Slot::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), SlotMut::Param(&mut self.bias));
    }
}

/// Pre-activation residual block: BN→ReLU→conv3×3→BN→ReLU→conv3×3, with a
/// 1×1 projection of the pre-activated input when width or stride changes.
#[derive(Debug, Clone)]
pub struct PreActBlock {
    pub bn1: BatchNorm,
    pub conv1: Conv2d,
    pub bn2: BatchNorm,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl PreActBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let bn1 = BatchNorm::new(in_ch);
        let conv1 = Conv2d::new(in_ch, out_ch, 3, stride, rng);
        let bn2 = BatchNorm::new(out_ch);
        let conv2 = Conv2d::new(out_ch, out_ch, 3, 1, rng);
        let shortcut = (in_ch != out_ch || stride != 1).then(|| Conv2d::new(in_ch, out_ch, 1, stride, rng));
        Self { bn1, conv1, bn2, conv2, shortcut }
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let a = self.bn1.forward(cx, x)?;
        let a = cx.tape.relu(a)?;
        let h = self.conv1.forward(cx, a)?;
        let h = self.bn2.forward(cx, h)?;
        let h = cx.tape.relu(h)?;
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(cx, a)?,
            None => x,
        };
        cx.tape.add(h, skip)
    }

    /// MACs for an `h×w` input, and the output spatial size.
    pub fn macs(&self, h: usize, w: usize) -> (u64, (usize, usize)) {
        let (ho, wo) = self.conv1.out_size(h, w);
        let mut m = self.conv1.macs(h, w) + self.conv2.macs(ho, wo);
        if let Some(p) = &self.shortcut {
            m += p.macs(h, w);
        }
        (m, (ho, wo))
    }
}

impl Visit for PreActBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// A run of residual blocks; only the first may change width or stride.
#[derive(Debug, Clone)]
pub struct BlockGroup {
    pub blocks: Vec<PreActBlock>,
}

impl BlockGroup {
    pub fn new(in_ch: usize, out_ch: usize, count: usize, stride: usize, rng: &mut Rng) -> Self {
        let blocks = (0..count)
            .map(|i| {
                if i == 0 {
                    PreActBlock::new(in_ch, out_ch, stride, rng)
                } else {
                    PreActBlock::new(out_ch, out_ch, 1, rng)
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv2.out_channels()).unwrap_or(0)
    }

    pub fn forward(&self, cx: &mut Fwd, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(cx, x)?;
        }
        Ok(x)
    }

    pub fn macs(&self, mut h: usize, mut w: usize) -> (u64, (usize, usize)) {
        let mut total = 0;
        for b in &self.blocks {
            let (m, (ho, wo)) = b.macs(h, w);
            total += m;
            (h, w) = (ho, wo);
        }
        (total, (h, w))
    }
}

impl Visit for BlockGroup {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Applies gathered batch statistics to every batch norm in `m`.
pub fn absorb_stats(m: &mut impl Visit, stats: &HashMap<ParamId, BatchStats>) {
    if stats.is_empty() {
        return;
    }
    // Buffers follow their gamma in visiting order: gamma, beta, mean, var.
    let mut current: Option<&BatchStats> = None;
    m.visit_mut("", &mut |name, slot| match slot {
        SlotMut::Param(p) => {
            if name.ends_with("gamma") {
                current = stats.get(&p.id());
            }
        }
        SlotMut::Buffer(t) => {
            if let Some(s) = current {
                let src = if name.ends_with("running_mean") { &s.mean } else { &s.var };
                for (r, b) in t.data_mut().iter_mut().zip(src) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
    });
}
