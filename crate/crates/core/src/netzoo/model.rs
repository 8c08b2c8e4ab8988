use std::collections::HashSet;

use crate::error::{invalid, PoeError, Result};
use crate::par::{self, Exec};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

use super::arch::{ArchConfig, InputShape};
use super::layers::{join, BatchNorm, BlockGroup, Conv2d, Fwd, Linear, Slot, SlotMut, Visit};

/// Parameter and FLOP accounting shared by every network component.
pub trait Accounting: Visit {
    /// Trainable scalars; batch-norm running statistics are not counted.
    fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| {
            if let Slot::Param(p) = s {
                n += p.value.len();
            }
        });
        n
    }

    /// `2 × MAC` of conv and linear layers for one sample of shape `input`.
    fn count_flops(&self, input: InputShape) -> u64;
}

/// conv1 through conv3: the trunk shared by every expert.
#[derive(Debug, Clone)]
pub struct Library {
    pub stem: Conv2d,
    pub conv2: BlockGroup,
    pub conv3: BlockGroup,
}

impl Library {
    fn new(cfg: &ArchConfig, rng: &mut Rng) -> Self {
        let b = cfg.blocks_per_group();
        let stem = Conv2d::new(cfg.input.channels, cfg.conv1_channels(), 3, 1, rng);
        let conv2 = BlockGroup::new(cfg.conv1_channels(), cfg.conv2_channels(), b, 1, rng);
        let conv3 = BlockGroup::new(cfg.conv2_channels(), cfg.conv3_channels(), b, 2, rng);
        Self { stem, conv2, conv3 }
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.stem.forward(cx, x)?;
        let h = self.conv2.forward(cx, h)?;
        self.conv3.forward(cx, h)
    }

    fn macs(&self, h: usize, w: usize) -> (u64, (usize, usize)) {
        let stem = self.stem.macs(h, w);
        let (m2, (h, w)) = self.conv2.macs(h, w);
        let (m3, hw) = self.conv3.macs(h, w);
        (stem + m2 + m3, hw)
    }

    /// Eval-mode features for a batch `[N, C, H, W]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut cx = Fwd::eval(&mut tape);
        let v = cx.tape.constant(x.clone())?;
        let y = self.forward(&mut cx, v)?;
        Ok(tape.take_value(y))
    }
}

impl Visit for Library {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.stem.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.stem.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
    }
}

impl Accounting for Library {
    fn count_flops(&self, input: InputShape) -> u64 {
        2 * self.macs(input.height, input.width).0
    }
}

/// conv4 group followed by BN→ReLU→global pool→linear. Used both as the
/// classifier of a full network and as a per-task expert.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv4: BlockGroup,
    pub bn: BatchNorm,
    pub fc: Linear,
}

impl Head {
    pub fn new(in_ch: usize, cfg: &ArchConfig, rng: &mut Rng) -> Self {
        let width = cfg.conv4_channels();
        let conv4 = BlockGroup::new(in_ch, width, cfg.blocks_per_group(), 2, rng);
        let bn = BatchNorm::new(width);
        let fc = Linear::new(width, cfg.num_classes, rng);
        Self { conv4, bn, fc }
    }

    /// Fresh head shaped by `cfg` for a library with `in_ch` output channels,
    /// initialized deterministically from `seed`.
    pub fn seeded(in_ch: usize, cfg: &ArchConfig, seed: u64) -> Self {
        Self::new(in_ch, cfg, &mut rng::stream(seed, rng::streams::INIT))
    }

    pub fn in_channels(&self) -> usize {
        self.conv4.blocks[0].conv1.in_channels()
    }

    pub fn num_outputs(&self) -> usize {
        self.fc.out_features()
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.conv4.forward(cx, x)?;
        let h = self.bn.forward(cx, h)?;
        let h = cx.tape.relu(h)?;
        let h = cx.tape.global_avg_pool(h)?;
        self.fc.forward(cx, h)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv4.macs(h, w).0 + self.fc.macs()
    }

    /// Eval-mode logits for precomputed library features.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut cx = Fwd::eval(&mut tape);
        let v = cx.tape.constant(features.clone())?;
        let y = self.forward(&mut cx, v)?;
        Ok(tape.take_value(y))
    }
}

impl Visit for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv4.visit(&join(prefix, "conv4"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.conv4.visit_mut(&join(prefix, "conv4"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

impl Accounting for Head {
    /// `input` is the library feature shape the head consumes.
    fn count_flops(&self, input: InputShape) -> u64 {
        2 * self.macs(input.height, input.width)
    }
}

/// A complete network of the WRN family.
#[derive(Debug, Clone)]
pub struct BlockNet {
    pub cfg: ArchConfig,
    pub library: Library,
    pub head: Head,
}

/// Builds a network with weights drawn deterministically from `seed`.
pub fn build_blocknet(cfg: &ArchConfig, seed: u64) -> Result<BlockNet> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, rng::streams::INIT);
    let library = Library::new(cfg, &mut rng);
    let head = Head::new(library.out_channels(), cfg, &mut rng);
    Ok(BlockNet { cfg: *cfg, library, head })
}

fn check_input(input: &InputShape, x: &Tensor) -> Result<()> {
    if x.rank() != 4 || x.shape()[1..] != input.dims() {
        return Err(PoeError::Shape(format!(
            "expected input [N, {}, {}, {}], got {:?}",
            input.channels,
            input.height,
            input.width,
            x.shape()
        )));
    }
    Ok(())
}

/// Runs `f` on each chunk of at most `batch` rows in eval mode and stacks the
/// results. Chunks are independent, so the output does not depend on `exec`.
fn batched<F>(x: &Tensor, batch: usize, exec: Exec, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let n = x.dim(0);
    let batch = batch.max(1);
    let starts: Vec<usize> = (0..n).step_by(batch).collect();
    let parts = par::try_map(exec, &starts, |&s| {
        let idx: Vec<usize> = (s..(s + batch).min(n)).collect();
        f(&x.select_rows(&idx))
    })?;
    if parts.is_empty() {
        return invalid("empty input batch");
    }
    Tensor::stack_rows(&parts)
}

impl BlockNet {
    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.library.forward(cx, x)?;
        self.head.forward(cx, h)
    }

    /// Eval-mode logits `[N, num_classes]`, evaluated in chunks of `batch`.
    pub fn predict(&self, x: &Tensor, batch: usize, exec: Exec) -> Result<Tensor> {
        check_input(&self.cfg.input, x)?;
        batched(x, batch, exec, |chunk| {
            let mut tape = Tape::inference();
            let mut cx = Fwd::eval(&mut tape);
            let v = cx.tape.constant(chunk.clone())?;
            let y = self.forward(&mut cx, v)?;
            Ok(tape.take_value(y))
        })
    }

    /// Eval-mode library features, evaluated in chunks of `batch`.
    pub fn features(&self, x: &Tensor, batch: usize, exec: Exec) -> Result<Tensor> {
        check_input(&self.cfg.input, x)?;
        batched(x, batch, exec, |chunk| self.library.features(chunk))
    }
}

impl Visit for BlockNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.library.visit(&join(prefix, "library"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.library.visit_mut(&join(prefix, "library"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl Accounting for BlockNet {
    fn count_flops(&self, input: InputShape) -> u64 {
        let (lib, (h, w)) = self.library.macs(input.height, input.width);
        2 * (lib + self.head.macs(h, w))
    }
}

/// The frozen trunk cut from a trained network, with the architecture its
/// heads follow.
#[derive(Debug, Clone)]
pub struct LibrarySplit {
    pub library: Library,
    pub head_template: ArchConfig,
}

/// Cuts `model` immediately after conv3.
pub fn split_library(model: &BlockNet) -> LibrarySplit {
    LibrarySplit { library: model.library.clone(), head_template: model.cfg }
}

impl LibrarySplit {
    pub fn input(&self) -> InputShape {
        self.head_template.input
    }

    pub fn output(&self) -> InputShape {
        self.head_template.library_output()
    }

    /// Head architecture for an expert of `classes` outputs at width `k_s`.
    pub fn expert_arch(&self, widen_special: f64, classes: usize) -> ArchConfig {
        self.head_template.with_head(widen_special, classes)
    }

    pub fn new_head(&self, widen_special: f64, classes: usize, seed: u64) -> Head {
        Head::seeded(self.library.out_channels(), &self.expert_arch(widen_special, classes), seed)
    }

    /// Eval-mode features, evaluated in chunks of `batch`.
    pub fn features(&self, x: &Tensor, batch: usize, exec: Exec) -> Result<Tensor> {
        check_input(&self.input(), x)?;
        batched(x, batch, exec, |chunk| self.library.features(chunk))
    }

    pub fn accepts(&self, head: &Head) -> bool {
        head.in_channels() == self.library.out_channels()
    }
}

impl Visit for LibrarySplit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.library.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.library.visit_mut(prefix, f);
    }
}

impl Accounting for LibrarySplit {
    fn count_flops(&self, input: InputShape) -> u64 {
        self.library.count_flops(input)
    }
}

/// Library feeding several heads whose logits are concatenated.
#[derive(Debug, Clone)]
pub struct BranchedModel {
    pub split: LibrarySplit,
    pub branches: Vec<Head>,
    /// Global class index of every position of the unified logit.
    pub class_map: Vec<usize>,
}

impl BranchedModel {
    /// `class_maps[i]` lists the global classes of branch `i` in output order.
    pub fn new(split: LibrarySplit, branches: Vec<Head>, class_maps: &[Vec<usize>]) -> Result<Self> {
        if branches.is_empty() {
            return invalid("a branched model needs at least one branch");
        }
        if branches.len() != class_maps.len() {
            return invalid(format!("{} branches but {} class maps", branches.len(), class_maps.len()));
        }
        let mut seen = HashSet::new();
        let mut class_map = Vec::new();
        for (i, (head, classes)) in branches.iter().zip(class_maps).enumerate() {
            if !split.accepts(head) {
                return Err(PoeError::Shape(format!(
                    "branch {i} expects {} input channels, library gives {}",
                    head.in_channels(),
                    split.library.out_channels()
                )));
            }
            if head.num_outputs() != classes.len() {
                return Err(PoeError::Shape(format!(
                    "branch {i} has {} outputs for {} classes",
                    head.num_outputs(),
                    classes.len()
                )));
            }
            for &c in classes {
                if !seen.insert(c) {
                    return invalid(format!("class {c} appears in more than one branch"));
                }
                class_map.push(c);
            }
        }
        Ok(Self { split, branches, class_map })
    }

    pub fn input(&self) -> InputShape {
        self.split.input()
    }

    /// Unified-logit range covered by each branch.
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.branches
            .iter()
            .map(|b| {
                let r = start..start + b.num_outputs();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn forward(&self, cx: &mut Fwd, x: Var) -> Result<Var> {
        let feat = self.split.library.forward(cx, x)?;
        let parts = self
            .branches
            .iter()
            .map(|b| b.forward(cx, feat))
            .collect::<Result<Vec<_>>>()?;
        cx.tape.concat_cols(&parts)
    }

    /// Eval-mode unified logits `[N, |Q|]`.
    pub fn predict(&self, x: &Tensor, batch: usize, exec: Exec) -> Result<Tensor> {
        check_input(&self.input(), x)?;
        batched(x, batch, exec, |chunk| {
            let mut tape = Tape::inference();
            let mut cx = Fwd::eval(&mut tape);
            let v = cx.tape.constant(chunk.clone())?;
            let y = self.forward(&mut cx, v)?;
            Ok(tape.take_value(y))
        })
    }
}

impl Visit for BranchedModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.split.visit(&join(prefix, "library"), f);
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.split.visit_mut(&join(prefix, "library"), f);
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch.{i}")), f);
        }
    }
}

impl Accounting for BranchedModel {
    fn count_flops(&self, input: InputShape) -> u64 {
        let feat = self.split.output();
        self.split.count_flops(input) + self.branches.iter().map(|b| b.count_flops(feat)).sum::<u64>()
    }
}
