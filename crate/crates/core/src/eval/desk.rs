//! Desk-scale experiment: one oracle, library and pool per seed, compared
//! against the baselines on the same data.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    confidence_histogram, consolidated_accuracy, task_specific_accuracy, ConfidenceHistogram, EvalReport, SampleKind,
    TaskScore,
};
use crate::consolidate::{assemble, CompositeQuery, ExpertPool, PoolExpert, PoolHyperparams};
use crate::data::{Dataset, DatasetSource, SynthConfig};
use crate::distill::{
    distill_library, extract_experts, train_ckd_head, train_kd, train_oracle, train_scratch, train_transfer,
    CkdTerms, DistillConfig, Features, Teacher, TrainConfig, INFER_BATCH,
};
use crate::error::{invalid, Result};
use crate::netzoo::{Accounting, ArchConfig, Head};
use crate::par::Exec;
use crate::rng::{self, streams};
use crate::store::Component;
use crate::task::TaskUniverse;

/// Depth and widening of one network family member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub depth: usize,
    pub widen_common: f64,
    pub widen_special: f64,
}

impl NetSpec {
    pub fn arch(&self, data: &Dataset) -> Result<ArchConfig> {
        ArchConfig::new(self.depth, self.widen_common, self.widen_special, data.num_classes, data.shape())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub source: DatasetSource,
    pub oracle: NetSpec,
    pub student: NetSpec,
    /// Expert width; also the conv4 width of scratch and kd-generic models.
    pub expert_widen: f64,
    pub oracle_train: TrainConfig,
    /// Student distillation.
    pub library: DistillConfig,
    /// Expert extraction; `terms` is overridden per ablation arm.
    pub expert: DistillConfig,
    /// Scratch, transfer and kd-generic training.
    pub baseline: DistillConfig,
    pub seeds: Vec<u64>,
    /// Combinations sampled per query size.
    pub combos_per_n: usize,
    pub consolidation_sizes: Vec<usize>,
    /// Run the training-time sweep over n(Q) = 1..=tasks, on the first seed only.
    pub timing: bool,
    pub exec: Exec,
}

impl Default for DeskConfig {
    /// Noisy synthetic data, hard enough that the methods separate, and the
    /// same schedule for every trained network except the oracle.
    fn default() -> Self {
        let train = TrainConfig { epochs: 60, ..Default::default() };
        Self {
            source: DatasetSource::Synthetic(SynthConfig { noise: 1.2, class_strength: 0.45, ..Default::default() }),
            oracle: NetSpec { depth: 16, widen_common: 2.0, widen_special: 2.0 },
            student: NetSpec { depth: 10, widen_common: 1.0, widen_special: 1.0 },
            expert_widen: 0.25,
            oracle_train: TrainConfig::default(),
            library: DistillConfig { train: train.clone(), ..Default::default() },
            expert: DistillConfig { train: train.clone(), ..Default::default() },
            baseline: DistillConfig { train, ..Default::default() },
            seeds: vec![0, 1, 2],
            combos_per_n: 6,
            consolidation_sizes: vec![2, 3],
            timing: true,
            exec: Exec::Parallel,
        }
    }
}

/// Time to obtain a model for a composite task of size `n_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub method: String,
    pub n_q: usize,
    pub seconds: f64,
    pub final_accuracy: f32,
    /// `(seconds, accuracy)` per epoch; a single point for assembly.
    pub curve: Vec<(f64, f32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub oracle_accuracy: f32,
    /// Mean over primitive tasks of the oracle's restricted accuracy.
    pub oracle_task_accuracy: f32,
    pub student_accuracy: f32,
    /// CKD, transfer, scratch, kd-generic: per-primitive task-specific accuracy.
    pub primitive: Vec<EvalReport>,
    /// Aggregated over every expert of a method; keys are method names.
    pub ood: BTreeMap<String, ConfidenceHistogram>,
    pub in_distribution: BTreeMap<String, ConfidenceHistogram>,
    /// Consolidated accuracy of the three loss arms per query size.
    pub ablation: Vec<EvalReport>,
    /// Jointly trained CKD models on the same composite tasks.
    pub joint: Vec<EvalReport>,
    pub timing: Vec<TimingPoint>,
    pub seconds: f64,
}

impl SeedReport {
    pub fn primitive_mean(&self, method: &str) -> Option<f32> {
        self.primitive.iter().find(|r| r.method == method).map(|r| r.mean)
    }

    pub fn ablation_mean(&self, method: &str, n: usize) -> Option<f32> {
        self.ablation.iter().find(|r| r.method == method && r.n_q == Some(n)).map(|r| r.mean)
    }

    pub fn joint_mean(&self, n: usize) -> Option<f32> {
        self.joint.iter().find(|r| r.n_q == Some(n)).map(|r| r.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub config: DeskConfig,
    pub seeds: Vec<SeedReport>,
}

impl DeskReport {
    /// Mean over seeds of `f`, skipping seeds where it is undefined.
    pub fn mean_over_seeds(&self, f: impl Fn(&SeedReport) -> Option<f32>) -> f32 {
        let v: Vec<f32> = self.seeds.iter().filter_map(f).collect();
        super::mean_std(&v).0
    }
}

pub const CKD: &str = "ckd";
pub const TRANSFER: &str = "transfer";
pub const SCRATCH: &str = "scratch";
pub const KD_GENERIC: &str = "kd-generic";
pub const BOTH: &str = "both";
pub const SOFT_ONLY: &str = "soft-only";
pub const SCALE_ONLY: &str = "scale-only";
pub const CKD_JOINT: &str = "ckd-joint";
pub const POE: &str = "poe";

/// Every `n`-subset of the primitives if there are at most `limit`, else
/// `limit` distinct ones drawn with `seed`.
pub fn combinations(universe: &TaskUniverse, n: usize, limit: usize, seed: u64) -> Result<Vec<CompositeQuery>> {
    let ids: Vec<&str> = universe.primitives.iter().map(|t| t.id.as_str()).collect();
    if n == 0 || n > ids.len() {
        return invalid(format!("query size {n} with {} primitives", ids.len()));
    }
    let mut all = Vec::new();
    let mut pick = Vec::with_capacity(n);
    subsets(ids.len(), n, 0, &mut pick, &mut all);
    if all.len() > limit {
        all.shuffle(&mut rng::stream(seed ^ n as u64, streams::COMBOS));
        all.truncate(limit);
    }
    all.into_iter().map(|s| CompositeQuery::new(s.into_iter().map(|i| ids[i]))).collect()
}

fn subsets(total: usize, n: usize, from: usize, pick: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pick.len() == n {
        out.push(pick.clone());
        return;
    }
    for i in from..total {
        pick.push(i);
        subsets(total, n, i + 1, pick, out);
        pick.pop();
    }
}

fn accuracy(logits: &crate::tensor::Tensor, labels: &[usize]) -> f32 {
    let pred = logits.argmax_rows();
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f32 / labels.len() as f32
}

/// Shared per-seed state: data, teacher and library.
struct Stage<'a> {
    train: &'a Dataset,
    eval: &'a Dataset,
    universe: &'a TaskUniverse,
    teacher: Teacher,
    split: crate::netzoo::LibrarySplit,
    features: Features,
    eval_features: Features,
    student_arch: ArchConfig,
    expert_widen: f64,
}

impl Stage<'_> {
    /// Scratch and kd-generic models: the student's trunk with the expert's conv4.
    fn small_arch(&self, classes: usize) -> ArchConfig {
        ArchConfig { num_classes: classes, widen_special: self.expert_widen, ..self.student_arch }
    }
}

fn head_logits_on(head: &Head, features: &Features, rows: &[usize]) -> Result<crate::tensor::Tensor> {
    head.logits(&features.rows(rows))
}

pub fn run_desk(cfg: &DeskConfig) -> Result<DeskReport> {
    if cfg.seeds.is_empty() {
        return invalid("no seeds");
    }
    let splits = cfg.source.load()?;
    let mut seeds = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        seeds.push(run_seed(cfg, seed, cfg.timing && i == 0, &splits.train, &splits.eval, &splits.universe)?);
    }
    Ok(DeskReport { config: cfg.clone(), seeds })
}

fn run_seed(cfg: &DeskConfig, seed: u64, timing: bool, train: &Dataset, eval: &Dataset, universe: &TaskUniverse) -> Result<SeedReport> {
    let start = Instant::now();
    let exec = cfg.exec;
    let oracle_arch = cfg.oracle.arch(train)?;
    let student_arch = cfg.student.arch(train)?;
    let (oracle, _) = train_oracle(&oracle_arch, train, &cfg.oracle_train.with_seed(seed), None)?;
    log::info!("seed {seed}: oracle trained");
    let teacher = Teacher::from_oracle(&oracle, &train.images, exec)?;
    let oracle_eval = oracle.predict(&eval.images, INFER_BATCH, exec)?;
    let oracle_accuracy = accuracy(&oracle_eval, &eval.labels);
    let identity: Vec<usize> = (0..universe.num_classes()).collect();
    let mut oracle_task = Vec::new();
    for t in &universe.primitives {
        oracle_task.push(task_specific_accuracy(&oracle_eval, &eval.labels, &identity, &t.class_indices)?);
    }

    let library_dc = DistillConfig { train: cfg.library.train.with_seed(seed), ..cfg.library.clone() };
    let (split, student, _) = distill_library(&student_arch, &teacher, train, &library_dc, None)?;
    let student_accuracy = accuracy(&student.predict(&eval.images, INFER_BATCH, exec)?, &eval.labels);
    log::info!("seed {seed}: library distilled");
    let features = Features::compute(&split, &train.images, exec)?;
    let eval_features = Features::compute(&split, &eval.images, exec)?;
    let stage = Stage { train, eval, universe, teacher, split, features, eval_features, student_arch, expert_widen: cfg.expert_widen };

    let expert_dc = |terms| DistillConfig { terms, train: cfg.expert.train.with_seed(seed), ..cfg.expert.clone() };
    let mut pools = Vec::new();
    for (name, terms) in [(BOTH, CkdTerms::Both), (SOFT_ONLY, CkdTerms::SoftOnly), (SCALE_ONLY, CkdTerms::ScaleOnly)] {
        let dc = expert_dc(terms);
        let records = extract_experts(&stage.split, &stage.features, &stage.teacher, &universe.primitives, cfg.expert_widen, &dc, exec)?;
        let hyper = PoolHyperparams {
            temperature: dc.temperature,
            alpha: dc.alpha,
            terms,
            arch: student_arch,
            widen_special: cfg.expert_widen,
        };
        let seconds: f64 = records.iter().map(|r| r.log.seconds()).sum();
        let pool = ExpertPool::new(universe.clone(), stage.split.clone(), records.into_iter().map(PoolExpert::from), hyper)?;
        pools.push((name, pool, seconds));
    }
    log::info!("seed {seed}: experts extracted");

    let baseline_dc = DistillConfig { train: cfg.baseline.train.with_seed(seed), ..cfg.baseline.clone() };
    let (primitive, ood, in_distribution) = primitive_comparison(&stage, &pools[0].1, pools[0].2, &baseline_dc, exec)?;
    log::info!("seed {seed}: baselines compared");

    let mut queries = Vec::new();
    for &n in &cfg.consolidation_sizes {
        queries.extend(combinations(universe, n, cfg.combos_per_n, seed)?);
    }
    let arms: Vec<(&str, &ExpertPool)> = pools.iter().map(|(n, p, _)| (*n, p)).collect();
    let ablation = super::ablation_report(&arms, &queries, eval, exec)?;
    let joint = joint_reports(&stage, &queries, cfg.expert_widen, &expert_dc(CkdTerms::Both))?;
    log::info!("seed {seed}: consolidation compared");

    let timing = if timing { timing_sweep(&stage, &pools[0].1, cfg.expert_widen, &expert_dc(CkdTerms::Both), &baseline_dc, exec)? } else { vec![] };

    Ok(SeedReport {
        seed,
        oracle_accuracy,
        oracle_task_accuracy: super::mean_std(&oracle_task).0,
        student_accuracy,
        primitive,
        ood,
        in_distribution,
        ablation,
        joint,
        timing,
        seconds: start.elapsed().as_secs_f64(),
    })
}

type Histograms = BTreeMap<String, ConfidenceHistogram>;

fn add_histograms(ood: &mut Histograms, id: &mut Histograms, method: &str, logits: &crate::tensor::Tensor, labels: &[usize], classes: &[usize]) -> Result<()> {
    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| classes.contains(&labels[i]));
    for (rows, kind, map) in [(outside, SampleKind::OutOfDistribution, &mut *ood), (inside, SampleKind::InDistribution, &mut *id)] {
        if rows.is_empty() {
            continue;
        }
        let h = confidence_histogram(&logits.select_rows(&rows), kind)?;
        map.entry(method.to_string()).or_insert_with(|| ConfidenceHistogram::empty(kind)).merge(&h)?;
    }
    Ok(())
}

/// Per-primitive comparison of CKD experts against transfer, scratch and
/// kd-generic, plus the confidence histograms of the specialized models.
fn primitive_comparison(
    s: &Stage,
    pool: &ExpertPool,
    ckd_seconds: f64,
    dc: &DistillConfig,
    exec: Exec,
) -> Result<(Vec<EvalReport>, Histograms, Histograms)> {
    let all_rows: Vec<usize> = (0..s.eval.len()).collect();
    let feat_shape = s.split.output();
    let mut ood = Histograms::new();
    let mut id = Histograms::new();

    let mut scores: BTreeMap<&str, Vec<TaskScore>> = BTreeMap::new();
    let mut cost: BTreeMap<&str, (usize, u64, f64)> = BTreeMap::new();
    let mut note = |m: &'static str, params: usize, flops: u64, secs: f64| {
        let c = cost.entry(m).or_insert((0, 0, 0.0));
        c.0 = c.0.max(params);
        c.1 = c.1.max(flops);
        c.2 += secs;
    };

    let library_params = s.split.count_params();
    let library_flops = s.split.count_flops(s.split.input());
    for t in &s.universe.primitives {
        let classes = &t.class_indices;
        let score = |acc| TaskScore { task: t.id.clone(), accuracy: acc };

        let e = pool.expert(&t.id)?;
        let logits = head_logits_on(&e.head, &s.eval_features, &all_rows)?;
        scores.entry(CKD).or_default().push(score(task_specific_accuracy(&logits, &s.eval.labels, classes, classes)?));
        add_histograms(&mut ood, &mut id, CKD, &logits, &s.eval.labels, classes)?;
        note(CKD, library_params + e.head.count_params(), library_flops + e.head.count_flops(feat_shape), 0.0);

        let (head, log) = train_transfer(&s.split, &s.features, s.train, classes, e.widen_special, &dc.train, None)?;
        let logits = head_logits_on(&head, &s.eval_features, &all_rows)?;
        scores.entry(TRANSFER).or_default().push(score(task_specific_accuracy(&logits, &s.eval.labels, classes, classes)?));
        add_histograms(&mut ood, &mut id, TRANSFER, &logits, &s.eval.labels, classes)?;
        note(TRANSFER, library_params + head.count_params(), library_flops + head.count_flops(feat_shape), log.seconds());

        let (net, log) = train_scratch(&s.small_arch(classes.len()), s.train, classes, &dc.train, None)?;
        let logits = net.predict(&s.eval.images, INFER_BATCH, exec)?;
        scores.entry(SCRATCH).or_default().push(score(task_specific_accuracy(&logits, &s.eval.labels, classes, classes)?));
        add_histograms(&mut ood, &mut id, SCRATCH, &logits, &s.eval.labels, classes)?;
        note(SCRATCH, net.count_params(), net.count_flops(net.cfg.input), log.seconds());
    }

    // One generic model serves every task.
    let (generic, log) = train_kd(&s.small_arch(s.universe.num_classes()), &s.teacher, s.train, dc, None)?;
    let logits = generic.predict(&s.eval.images, INFER_BATCH, exec)?;
    let identity: Vec<usize> = (0..s.universe.num_classes()).collect();
    for t in &s.universe.primitives {
        let acc = task_specific_accuracy(&logits, &s.eval.labels, &identity, &t.class_indices)?;
        scores.entry(KD_GENERIC).or_default().push(TaskScore { task: t.id.clone(), accuracy: acc });
    }
    note(KD_GENERIC, generic.count_params(), generic.count_flops(generic.cfg.input), log.seconds());
    cost.entry(CKD).or_default().2 = ckd_seconds;

    let mut reports = Vec::new();
    for m in [CKD, TRANSFER, SCRATCH, KD_GENERIC] {
        let (p, f, secs) = cost[m];
        reports.push(EvalReport::new(m, Some(1), scores.remove(m).unwrap_or_default(), p, f, secs)?);
    }
    Ok((reports, ood, id))
}

/// A CKD head of width `k_s·n(Q)` trained on the whole composite task.
fn train_joint(s: &Stage, q: &CompositeQuery, widen: f64, dc: &DistillConfig) -> Result<(Head, Vec<usize>, f64)> {
    let classes = q.classes(s.universe)?;
    let (head, log) = train_ckd_head(&s.split, &s.features, &s.teacher, &classes, widen * q.n() as f64, dc, None)?;
    Ok((head, classes, log.seconds()))
}

fn joint_reports(s: &Stage, queries: &[CompositeQuery], widen: f64, dc: &DistillConfig) -> Result<Vec<EvalReport>> {
    let all_rows: Vec<usize> = (0..s.eval.len()).collect();
    let mut sizes: Vec<usize> = queries.iter().map(CompositeQuery::n).collect();
    sizes.dedup();
    let mut out = Vec::new();
    for n in sizes {
        let (mut scores, mut params, mut flops, mut secs) = (Vec::new(), 0, 0, 0.0);
        for q in queries.iter().filter(|q| q.n() == n) {
            let (head, classes, t) = train_joint(s, q, widen, dc)?;
            let logits = head_logits_on(&head, &s.eval_features, &all_rows)?;
            let acc = task_specific_accuracy(&logits, &s.eval.labels, &classes, &classes)?;
            scores.push(TaskScore { task: q.task_ids().join(","), accuracy: acc });
            params = params.max(s.split.count_params() + head.count_params());
            flops = flops.max(s.split.count_flops(s.split.input()) + head.count_flops(s.split.output()));
            secs += t;
        }
        out.push(EvalReport::new(CKD_JOINT, Some(n), scores, params, flops, secs)?);
    }
    Ok(out)
}

/// For n(Q) = 1..=all primitives (first n tasks), the time each method needs
/// to produce a model, with per-epoch accuracy curves.
fn timing_sweep(s: &Stage, pool: &ExpertPool, widen: f64, ckd: &DistillConfig, dc: &DistillConfig, exec: Exec) -> Result<Vec<TimingPoint>> {
    let ids: Vec<&str> = s.universe.primitives.iter().map(|t| t.id.as_str()).collect();
    let mut out = Vec::new();
    for n in 1..=ids.len() {
        let q = CompositeQuery::new(ids[..n].iter().copied())?;
        let classes = q.classes(s.universe)?;
        let rows = s.eval.indices_of(&classes);
        let labels: Vec<usize> = rows.iter().map(|&r| s.eval.labels[r]).collect();
        let eval_sub = s.eval.subset(&rows);
        let head_acc = |h: &Head| -> Result<f32> {
            let logits = head_logits_on(h, &s.eval_features, &rows)?;
            task_specific_accuracy(&logits, &labels, &classes, &classes)
        };
        let point = |method: &str, curve: Vec<(f64, f32)>, seconds| TimingPoint {
            method: method.into(),
            n_q: n,
            seconds,
            final_accuracy: curve.last().map_or(f32::NAN, |c| c.1),
            curve,
        };

        let mut monitor = |net: &crate::netzoo::BlockNet| -> Result<f32> {
            let local = net.predict(&eval_sub.images, INFER_BATCH, exec)?;
            task_specific_accuracy(&local, &labels, &classes, &classes)
        };
        let (_, log) = train_scratch(&s.small_arch(classes.len()), s.train, &classes, &dc.train, Some(&mut monitor))?;
        out.push(point(SCRATCH, log.curve(), log.seconds()));

        let mut monitor = |h: &Head| head_acc(h);
        let (_, log) = train_transfer(&s.split, &s.features, s.train, &classes, widen * n as f64, &dc.train, Some(&mut monitor))?;
        out.push(point(TRANSFER, log.curve(), log.seconds()));

        let mut monitor = |h: &Head| head_acc(h);
        let (_, log) = train_ckd_head(&s.split, &s.features, &s.teacher, &classes, widen * n as f64, ckd, Some(&mut monitor))?;
        out.push(point(CKD_JOINT, log.curve(), log.seconds()));

        let started = Instant::now();
        let tm = assemble(pool, &q)?;
        let bytes = Component::TaskModel(tm).to_bytes()?;
        let seconds = started.elapsed().as_secs_f64();
        debug_assert!(!bytes.is_empty());
        let (acc, ..) = consolidated_accuracy(pool, &q, s.eval, exec)?;
        out.push(point(POE, vec![(seconds, acc)], seconds));
    }
    Ok(out)
}
