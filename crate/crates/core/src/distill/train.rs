use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::{ckd_term, kd_term, CkdTerms};
use crate::data::Dataset;
use crate::error::{invalid, PoeError, Result};
use crate::netzoo::{absorb_stats, build_blocknet, split_library, weights_digest, ArchConfig, BlockNet, Fwd, Head, LibrarySplit, Visit};
use crate::par::Exec;
use crate::rng::{self, streams};
use crate::task::PrimitiveTask;
use crate::tensor::{Sgd, SgdConfig, Tape, Tensor, Var};

/// Rows per forward pass when only inference is needed.
pub const INFER_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Learning-rate multiplier applied at each milestone.
    pub lr_decay: f32,
    /// Milestones as fractions of `epochs`.
    pub milestones: Vec<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            sgd: SgdConfig::default(),
            seed: 0,
            lr_decay: 0.2,
            milestones: vec![0.5, 0.75],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.epochs == 0 {
            return invalid("epochs must be positive");
        }
        if self.batch_size < 2 {
            return invalid("batch norm needs batches of at least 2");
        }
        if !(self.lr_decay > 0.0) {
            return invalid("lr_decay must be positive");
        }
        Ok(())
    }

    /// Step schedule: the base rate times `lr_decay` per milestone passed.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f32).floor() as usize)
            .count();
        self.sgd.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub temperature: f32,
    pub alpha: f32,
    pub terms: CkdTerms,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 4.0, alpha: 0.3, terms: CkdTerms::Both, train: TrainConfig::default() }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form; identifies how an expert was made.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training wall time so far, monitoring excluded.
    pub seconds: f64,
    pub lr: f32,
    pub loss: f32,
    pub eval_accuracy: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// The task had one class, so the objective was constant.
    pub degenerate: bool,
}

impl TrainLog {
    pub fn seconds(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.seconds)
    }

    /// `(seconds, accuracy)` for every monitored epoch.
    pub fn curve(&self) -> Vec<(f64, f32)> {
        self.epochs.iter().filter_map(|e| e.eval_accuracy.map(|a| (e.seconds, a))).collect()
    }
}

/// Called after each epoch; returns an evaluation accuracy to log.
pub type Monitor<'a, M> = Option<&'a mut dyn FnMut(&M) -> Result<f32>>;

/// Minibatch SGD over `n` samples. `loss` builds the objective of one batch
/// on the tape inside `Fwd`; batch-norm statistics gathered there are folded
/// into the running estimates after each update.
fn fit<M, L>(model: &mut M, n: usize, tc: &TrainConfig, mut loss: L, mut monitor: Monitor<M>) -> Result<TrainLog>
where
    M: Visit,
    L: FnMut(&M, &mut Fwd, &[usize]) -> Result<Var>,
{
    tc.validate()?;
    if n < 2 {
        return Err(PoeError::Dataset(format!("need at least 2 training samples, got {n}")));
    }
    let mut opt = Sgd::new(tc.sgd)?;
    let mut order_rng = rng::stream(tc.seed, streams::SHUFFLE);
    let mut log = TrainLog::default();
    let mut elapsed = 0.0;
    for epoch in 0..tc.epochs {
        let start = Instant::now();
        let lr = tc.lr_at(epoch);
        opt.set_learning_rate(lr);
        let order = rng::permutation(&mut order_rng, n);
        let (mut total, mut batches) = (0.0f64, 0usize);
        for idx in order.chunks(tc.batch_size).filter(|c| c.len() >= 2) {
            let mut tape = Tape::new();
            let mut cx = Fwd::train(&mut tape);
            let l = loss(model, &mut cx, idx)?;
            let stats = std::mem::take(&mut cx.stats);
            total += tape.value(l).item() as f64;
            batches += 1;
            let grads = tape.backward(l)?;
            opt.step(model.params_mut(), &grads)?;
            absorb_stats(model, &stats);
        }
        elapsed += start.elapsed().as_secs_f64();
        let eval_accuracy = match monitor.as_mut() {
            Some(m) => Some(m(model)?),
            None => None,
        };
        let loss = (total / batches.max(1) as f64) as f32;
        debug!("epoch {epoch} lr {lr:.4} loss {loss:.4} eval {eval_accuracy:?}");
        log.epochs.push(EpochRecord { epoch, seconds: elapsed, lr, loss, eval_accuracy });
    }
    Ok(log)
}

fn check_net(cfg: &ArchConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(PoeError::Dataset("empty training set".into()));
    }
    if cfg.input != data.shape() {
        return Err(PoeError::Shape(format!("architecture input {:?} vs data {:?}", cfg.input, data.shape())));
    }
    if cfg.num_classes != data.num_classes {
        return invalid(format!("{} outputs for {} classes", cfg.num_classes, data.num_classes));
    }
    Ok(())
}

/// Cross-entropy training of a fresh network on hard labels.
pub fn train_classifier(cfg: &ArchConfig, data: &Dataset, tc: &TrainConfig, monitor: Monitor<BlockNet>) -> Result<(BlockNet, TrainLog)> {
    check_net(cfg, data)?;
    let mut net = build_blocknet(cfg, tc.seed)?;
    let log = fit(
        &mut net,
        data.len(),
        tc,
        |m, cx, idx| {
            let x = cx.tape.constant(data.images.select_rows(idx))?;
            let y = m.forward(cx, x)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            cx.tape.cross_entropy(y, &labels)
        },
        monitor,
    )?;
    Ok((net, log))
}

/// The oracle: a classifier over every class, trained from scratch.
pub fn train_oracle(cfg: &ArchConfig, data: &Dataset, tc: &TrainConfig, monitor: Monitor<BlockNet>) -> Result<(BlockNet, TrainLog)> {
    train_classifier(cfg, data, tc, monitor)
}

/// Eval-mode oracle logits for a fixed set of inputs.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub logits: Tensor,
}

impl Teacher {
    pub fn from_oracle(oracle: &BlockNet, images: &Tensor, exec: Exec) -> Result<Self> {
        Ok(Self { logits: oracle.predict(images, INFER_BATCH, exec)? })
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.logits.dim(0) != n {
            return Err(PoeError::Shape(format!("{} teacher rows for {n} samples", self.logits.dim(0))));
        }
        Ok(())
    }

    fn rows(&self, idx: &[usize]) -> Tensor {
        self.logits.select_rows(idx)
    }
}

/// Standard KD of a fresh `student_cfg` network against `teacher` on every
/// training input; labels are not used.
pub fn train_kd(
    student_cfg: &ArchConfig,
    teacher: &Teacher,
    data: &Dataset,
    dc: &DistillConfig,
    monitor: Monitor<BlockNet>,
) -> Result<(BlockNet, TrainLog)> {
    dc.validate()?;
    check_net(student_cfg, data)?;
    teacher.check(data.len())?;
    if teacher.logits.dim(1) != student_cfg.num_classes {
        return invalid(format!(
            "teacher has {} classes, student {}",
            teacher.logits.dim(1),
            student_cfg.num_classes
        ));
    }
    let mut net = build_blocknet(student_cfg, dc.train.seed)?;
    let log = fit(
        &mut net,
        data.len(),
        &dc.train,
        |m, cx, idx| {
            let x = cx.tape.constant(data.images.select_rows(idx))?;
            let y = m.forward(cx, x)?;
            kd_term(cx.tape, &teacher.rows(idx), y, dc.temperature)
        },
        monitor,
    )?;
    Ok((net, log))
}

/// KD into the student, then the cut after conv3.
pub fn distill_library(
    student_cfg: &ArchConfig,
    teacher: &Teacher,
    data: &Dataset,
    dc: &DistillConfig,
    monitor: Monitor<BlockNet>,
) -> Result<(LibrarySplit, BlockNet, TrainLog)> {
    let (student, log) = train_kd(student_cfg, teacher, data, dc, monitor)?;
    Ok((split_library(&student), student, log))
}

/// Frozen-library features of a fixed set of inputs, tagged with the digest
/// of the library that produced them.
#[derive(Debug, Clone)]
pub struct Features {
    pub data: Tensor,
    pub library_digest: String,
}

impl Features {
    pub fn compute(split: &LibrarySplit, images: &Tensor, exec: Exec) -> Result<Self> {
        Ok(Self {
            data: split.features(images, INFER_BATCH, exec)?,
            library_digest: weights_digest(split),
        })
    }

    fn check(&self, split: &LibrarySplit, n: usize) -> Result<()> {
        let found = weights_digest(split);
        if found != self.library_digest {
            return Err(PoeError::DigestMismatch { expected: self.library_digest.clone(), found });
        }
        if self.data.dim(0) != n {
            return Err(PoeError::Shape(format!("{} feature rows for {n} samples", self.data.dim(0))));
        }
        Ok(())
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor {
        self.data.select_rows(idx)
    }
}

fn fit_head<L>(
    split: &LibrarySplit,
    widen_special: f64,
    classes: usize,
    rows: &[usize],
    features: &Features,
    tc: &TrainConfig,
    mut loss: L,
    monitor: Monitor<Head>,
) -> Result<(Head, TrainLog)>
where
    L: FnMut(&mut Tape, Var, &[usize]) -> Result<Var>,
{
    let mut head = split.new_head(widen_special, classes, tc.seed);
    let log = fit(
        &mut head,
        rows.len(),
        tc,
        |h, cx, idx| {
            let picked: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
            let x = cx.tape.constant(features.rows(&picked))?;
            let y = h.forward(cx, x)?;
            loss(cx.tape, y, &picked)
        },
        monitor,
    )?;
    Ok((head, log))
}

/// Conditional KD of a head for `classes` on the frozen library, using every
/// training input. `features` must come from `split`.
pub fn train_ckd_head(
    split: &LibrarySplit,
    features: &Features,
    teacher: &Teacher,
    classes: &[usize],
    widen_special: f64,
    dc: &DistillConfig,
    monitor: Monitor<Head>,
) -> Result<(Head, TrainLog)> {
    dc.validate()?;
    let n = teacher.logits.dim(0);
    features.check(split, n)?;
    if classes.is_empty() {
        return invalid("expert for an empty class set");
    }
    let all: Vec<usize> = (0..n).collect();
    fit_head(
        split,
        widen_special,
        classes.len(),
        &all,
        features,
        &dc.train,
        |tape, y, idx| ckd_term(tape, &teacher.rows(idx), y, classes, dc.temperature, dc.alpha, dc.terms),
        monitor,
    )
}

/// An extracted expert and where it came from.
#[derive(Debug, Clone)]
pub struct ExpertRecord {
    pub task: String,
    pub classes: Vec<usize>,
    pub widen_special: f64,
    pub head: Head,
    pub library_digest: String,
    pub config_digest: String,
    pub log: TrainLog,
}

pub fn extract_expert(
    split: &LibrarySplit,
    features: &Features,
    teacher: &Teacher,
    task: &PrimitiveTask,
    widen_special: f64,
    dc: &DistillConfig,
) -> Result<ExpertRecord> {
    let (head, log) = train_ckd_head(split, features, teacher, &task.class_indices, widen_special, dc, None)?;
    Ok(ExpertRecord {
        task: task.id.clone(),
        classes: task.class_indices.clone(),
        widen_special,
        head,
        library_digest: features.library_digest.clone(),
        config_digest: dc.digest(),
        log,
    })
}

/// One expert per task. Extractions are independent; `exec` only decides
/// whether they run concurrently.
pub fn extract_experts(
    split: &LibrarySplit,
    features: &Features,
    teacher: &Teacher,
    tasks: &[PrimitiveTask],
    widen_special: f64,
    dc: &DistillConfig,
    exec: Exec,
) -> Result<Vec<ExpertRecord>> {
    crate::par::try_map(exec, tasks, |t| extract_expert(split, features, teacher, t, widen_special, dc))
}

/// Rows of `data` labelled in `classes`, with labels local to `classes`.
fn task_rows(data: &Dataset, classes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rows = data.indices_of(classes);
    if rows.is_empty() {
        return Err(PoeError::Dataset("no training samples for the task".into()));
    }
    let local = rows
        .iter()
        .map(|&i| classes.iter().position(|&c| c == data.labels[i]).expect("filtered"))
        .collect();
    Ok((rows, local))
}

/// Fresh network of architecture `arch` (its class count is replaced by
/// `|classes|`) trained with cross-entropy on the task's samples only.
pub fn train_scratch(arch: &ArchConfig, data: &Dataset, classes: &[usize], tc: &TrainConfig, monitor: Monitor<BlockNet>) -> Result<(BlockNet, TrainLog)> {
    let sub = data.restrict(classes)?;
    let cfg = ArchConfig { num_classes: classes.len(), ..*arch };
    let (net, mut log) = train_classifier(&cfg, &sub, tc, monitor)?;
    log.degenerate = classes.len() == 1;
    Ok((net, log))
}

/// Head on the frozen library trained with cross-entropy on the task's samples only.
#[allow(clippy::too_many_arguments)]
pub fn train_transfer(
    split: &LibrarySplit,
    features: &Features,
    data: &Dataset,
    classes: &[usize],
    widen_special: f64,
    tc: &TrainConfig,
    monitor: Monitor<Head>,
) -> Result<(Head, TrainLog)> {
    features.check(split, data.len())?;
    let (rows, local) = task_rows(data, classes)?;
    let (head, mut log) = fit_head(
        split,
        widen_special,
        classes.len(),
        &rows,
        features,
        tc,
        |tape, y, picked| {
            let labels: Vec<usize> = picked
                .iter()
                .map(|r| local[rows.binary_search(r).expect("row from the task")])
                .collect();
            tape.cross_entropy(y, &labels)
        },
        monitor,
    )?;
    log.degenerate = classes.len() == 1;
    Ok((head, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Scratch,
    Transfer,
    Kd,
}

/// A baseline model: a whole network or a head on the shared library.
#[derive(Debug, Clone)]
pub enum Baseline {
    Net(BlockNet),
    Head(Head),
}

/// Everything a baseline may need; which fields are required depends on the kind.
pub struct BaselineInputs<'a> {
    pub data: &'a Dataset,
    /// Architecture of the specialized model (class count is set per kind).
    pub arch: ArchConfig,
    pub split: Option<(&'a LibrarySplit, &'a Features)>,
    pub teacher: Option<&'a Teacher>,
}

/// Trains a comparison model. Scratch and transfer see only samples of
/// `classes`; kd sees everything and covers every class.
pub fn train_baseline(kind: BaselineKind, inputs: &BaselineInputs, classes: &[usize], dc: &DistillConfig) -> Result<(Baseline, TrainLog)> {
    match kind {
        BaselineKind::Scratch => {
            let (net, log) = train_scratch(&inputs.arch, inputs.data, classes, &dc.train, None)?;
            Ok((Baseline::Net(net), log))
        }
        BaselineKind::Transfer => {
            let Some((split, feats)) = inputs.split else {
                return invalid("transfer needs a library");
            };
            let (head, log) = train_transfer(split, feats, inputs.data, classes, inputs.arch.widen_special, &dc.train, None)?;
            Ok((Baseline::Head(head), log))
        }
        BaselineKind::Kd => {
            let Some(teacher) = inputs.teacher else {
                return invalid("kd needs teacher logits");
            };
            let cfg = ArchConfig { num_classes: inputs.data.num_classes, ..inputs.arch };
            let (net, log) = train_kd(&cfg, teacher, inputs.data, dc, None)?;
            Ok((Baseline::Net(net), log))
        }
    }
}
