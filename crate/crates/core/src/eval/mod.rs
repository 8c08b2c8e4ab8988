//! Evaluation protocol: task-specific accuracy, confidence histograms,
//! report tables, and the desk-scale experiment harness.

pub mod desk;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consolidate::{assemble, CompositeQuery, ExpertPool};
use crate::data::Dataset;
use crate::error::{invalid, PoeError, Result};
use crate::par::Exec;
use crate::tensor::Tensor;

pub use desk::{run_desk, DeskConfig, DeskReport, NetSpec, SeedReport, TimingPoint};

/// Restricted argmax of every row: among positions whose global class
/// (`class_map[p]`) lies in `q`, the largest logit wins; ties go to the lowest
/// global class. Returns global classes.
pub fn restricted_predictions(logits: &Tensor, class_map: &[usize], q: &[usize]) -> Result<Vec<usize>> {
    if logits.rank() != 2 || logits.dim(1) != class_map.len() {
        return Err(PoeError::Shape(format!(
            "logits {:?} do not match a class map of {}",
            logits.shape(),
            class_map.len()
        )));
    }
    let positions: Vec<usize> = (0..class_map.len()).filter(|&p| q.contains(&class_map[p])).collect();
    if positions.is_empty() {
        return invalid("no logit position maps into the query");
    }
    let width = class_map.len();
    Ok(logits
        .data()
        .chunks_exact(width)
        .map(|row| {
            let mut best = positions[0];
            for &p in &positions[1..] {
                let (v, b) = (row[p], row[best]);
                if v > b || (v == b && class_map[p] < class_map[best]) {
                    best = p;
                }
            }
            class_map[best]
        })
        .collect())
}

/// Accuracy over the samples labelled in `q`, predicting by restricted argmax.
/// `logits` has one row per entry of `labels`.
pub fn task_specific_accuracy(logits: &Tensor, labels: &[usize], class_map: &[usize], q: &[usize]) -> Result<f32> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(PoeError::Shape(format!("{} logit rows for {} labels", logits.dim(0), labels.len())));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| q.contains(&labels[i])).collect();
    if rows.is_empty() {
        return Err(PoeError::Dataset("no evaluation samples fall in the task".into()));
    }
    let pred = restricted_predictions(&logits.select_rows(&rows), class_map, q)?;
    let hits = rows.iter().zip(&pred).filter(|(&i, &p)| labels[i] == p).count();
    Ok(hits as f32 / rows.len() as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    InDistribution,
    OutOfDistribution,
}

pub const BINS: usize = 10;

/// Counts of maximum softmax probability in ten bins of width 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub kind: SampleKind,
}

impl ConfidenceHistogram {
    pub fn empty(kind: SampleKind) -> Self {
        Self { edges: (0..=BINS).map(|i| i as f64 / BINS as f64).collect(), counts: vec![0; BINS], kind }
    }

    /// Bin of a probability; 1.0 lands in the top bin.
    pub fn bin(p: f64) -> usize {
        ((p * BINS as f64).floor().max(0.0) as usize).min(BINS - 1)
    }

    pub fn add(&mut self, p: f64) {
        self.counts[Self::bin(p)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Most populated bin; ties resolve to the lower bin.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    pub fn merge(&mut self, other: &ConfidenceHistogram) -> Result<()> {
        if self.kind != other.kind {
            return invalid("cannot merge histograms of different sample kinds");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Largest softmax probability of each row, in f64.
pub fn max_confidences(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.dim(1) == 0 {
        return Err(PoeError::Shape(format!("expected [n, k] logits, got {:?}", logits.shape())));
    }
    Ok(logits
        .data()
        .chunks_exact(logits.dim(1))
        .map(|row| {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            1.0 / z
        })
        .collect())
}

pub fn confidence_histogram(logits: &Tensor, kind: SampleKind) -> Result<ConfidenceHistogram> {
    if logits.rank() == 2 && logits.dim(0) == 0 {
        return invalid("no samples to histogram");
    }
    let mut h = ConfidenceHistogram::empty(kind);
    for p in max_confidences(logits)? {
        h.add(p);
    }
    Ok(h)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f32]) -> (f32, f32) {
    if xs.is_empty() {
        return (f32::NAN, f32::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var.sqrt() as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    /// Task id, or comma-joined ids for a composite task.
    pub task: String,
    pub accuracy: f32,
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_q: Option<usize>,
    pub per_task: Vec<TaskScore>,
    pub mean: f32,
    pub std: f32,
    /// Per model; the largest over the evaluated models.
    pub params: usize,
    pub flops: u64,
    /// Total training or assembly wall time.
    pub seconds: f64,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, n_q: Option<usize>, per_task: Vec<TaskScore>, params: usize, flops: u64, seconds: f64) -> Result<Self> {
        if per_task.is_empty() {
            return invalid("a report needs at least one task");
        }
        if let Some(s) = per_task.iter().find(|s| !(0.0..=1.0).contains(&s.accuracy)) {
            return invalid(format!("accuracy {} of `{}` is outside [0, 1]", s.accuracy, s.task));
        }
        let acc: Vec<f32> = per_task.iter().map(|s| s.accuracy).collect();
        let (mean, std) = mean_std(&acc);
        Ok(Self { method: method.into(), n_q, per_task, mean, std, params, flops, seconds })
    }
}

/// Aligned text table, one line per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let w = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<w$}  {:>4}  {:>7}  {:>6}  {:>9}  {:>11}  {:>9}\n",
        "method", "n(Q)", "acc %", "std", "params", "flops", "seconds"
    );
    for r in reports {
        let n = r.n_q.map_or("-".to_string(), |n| n.to_string());
        let _ = writeln!(
            out,
            "{:<w$}  {:>4}  {:>7.2}  {:>6.2}  {:>9}  {:>11}  {:>9.3}",
            r.method,
            n,
            100.0 * r.mean,
            100.0 * r.std,
            r.params,
            r.flops,
            r.seconds
        );
    }
    out
}

/// Accuracy of the model assembled from `pool` for `q` on the samples of `eval`
/// labelled in `q`.
pub fn consolidated_accuracy(pool: &ExpertPool, q: &CompositeQuery, eval: &Dataset, exec: Exec) -> Result<(f32, usize, u64, f64)> {
    let classes = q.classes(&pool.universe)?;
    let rows = eval.indices_of(&classes);
    let sub = eval.subset(&rows);
    let tm = assemble(pool, q)?;
    let logits = tm.model.predict(&sub.images, crate::distill::INFER_BATCH, exec)?;
    let acc = task_specific_accuracy(&logits, &sub.labels, tm.class_map(), &classes)?;
    Ok((acc, tm.params, tm.flops, tm.assembly_seconds))
}

/// Consolidated accuracy of several pools that differ only in how their
/// experts were trained, one report per pool and query size.
pub fn ablation_report(pools: &[(&str, &ExpertPool)], queries: &[CompositeQuery], eval: &Dataset, exec: Exec) -> Result<Vec<EvalReport>> {
    let Some((_, first)) = pools.first() else {
        return invalid("no pools to compare");
    };
    if let Some((name, _)) = pools.iter().find(|(_, p)| p.universe != first.universe) {
        return invalid(format!("pool `{name}` has a different task universe"));
    }
    let mut sizes: Vec<usize> = queries.iter().map(CompositeQuery::n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = Vec::new();
    for (name, pool) in pools {
        for &n in &sizes {
            let mut scores = Vec::new();
            let (mut params, mut flops, mut seconds) = (0, 0, 0.0);
            for q in queries.iter().filter(|q| q.n() == n) {
                let (acc, p, f, s) = consolidated_accuracy(pool, q, eval, exec)?;
                scores.push(TaskScore { task: q.task_ids().join(","), accuracy: acc });
                params = params.max(p);
                flops = flops.max(f);
                seconds += s;
            }
            out.push(EvalReport::new(*name, Some(n), scores, params, flops, seconds)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn perfect_model_scores_one() {
        let labels = vec![0, 1, 2, 3];
        let mut d = vec![0.0; 16];
        for (i, &l) in labels.iter().enumerate() {
            d[i * 4 + l] = 5.0;
        }
        assert_eq!(task_specific_accuracy(&t(4, 4, d), &labels, &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
    }

    #[test]
    fn uniform_model_wins_only_the_lowest_class() {
        // One sample per class; ties resolve to class 3, the lowest in Q.
        let q = [3, 5, 7, 9];
        let labels = q.to_vec();
        let map: Vec<usize> = (0..10).collect();
        let acc = task_specific_accuracy(&t(4, 10, vec![0.0; 40]), &labels, &map, &q).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn ties_follow_global_class_not_position() {
        let map = [7, 2];
        assert_eq!(restricted_predictions(&t(1, 2, vec![1.0, 1.0]), &map, &[2, 7]).unwrap(), [2]);
    }

    #[test]
    fn empty_task_set_is_an_error() {
        assert!(task_specific_accuracy(&t(1, 2, vec![0.0, 1.0]), &[0], &[0, 1], &[1]).is_err());
        assert!(confidence_histogram(&Tensor::zeros(&[0, 2]), SampleKind::OutOfDistribution).is_err());
    }

    #[test]
    fn histogram_extremes() {
        let h = confidence_histogram(&t(3, 2, vec![0.0; 6]), SampleKind::InDistribution).unwrap();
        assert_eq!(h.counts[5], 3);
        assert_eq!(h.mode(), 5);
        let h = confidence_histogram(&t(2, 2, vec![100.0, 0.0, 0.0, 100.0]), SampleKind::InDistribution).unwrap();
        assert_eq!(h.counts[9], 2);
        assert_eq!(ConfidenceHistogram::bin(1.0), 9);
        assert_eq!(ConfidenceHistogram::bin(0.0), 0);
        assert_eq!(h.edges.len(), 11);
    }

    #[test]
    fn report_statistics() {
        let s = |a| TaskScore { task: "x".into(), accuracy: a };
        let r = EvalReport::new("m", None, vec![s(0.5), s(1.0)], 1, 2, 0.0).unwrap();
        assert_eq!((r.mean, r.std), (0.75, 0.25));
        assert!(EvalReport::new("m", None, vec![s(1.5)], 1, 2, 0.0).is_err());
        assert!(EvalReport::new("m", None, vec![], 1, 2, 0.0).is_err());
        assert!(render_table(&[r]).lines().nth(1).unwrap().contains("75.00"));
    }

    proptest! {
        /// Restricted accuracy of a generic model equals the plain accuracy of
        /// its logits sliced to Q on the relabelled subset.
        #[test]
        fn restricted_accuracy_matches_brute_force(
            seed in any::<u64>(),
            n in 1usize..200,
            q_mask in 1u8..=255,
        ) {
            use rand::{Rng, SeedableRng};
            let classes = 8;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<usize> = (0..classes).filter(|c| q_mask & (1 << c) != 0).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            // Coarse values make ties common.
            let data: Vec<f32> = (0..n * classes).map(|_| rng.gen_range(0..4) as f32).collect();
            let logits = t(n, classes, data.clone());
            let map: Vec<usize> = (0..classes).collect();
            let got = task_specific_accuracy(&logits, &labels, &map, &q);

            let mut hits = 0;
            let mut total = 0;
            for i in 0..n {
                if !q.contains(&labels[i]) { continue; }
                total += 1;
                let row = &data[i * classes..(i + 1) * classes];
                let mut best = q[0];
                for &c in &q { if row[c] > row[best] { best = c; } }
                hits += usize::from(best == labels[i]);
            }
            if total == 0 {
                prop_assert!(got.is_err());
            } else {
                prop_assert_eq!(got.unwrap(), hits as f32 / total as f32);
            }
        }

        #[test]
        fn histograms_ignore_sample_order(seed in any::<u64>(), n in 1usize..64) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rng);
            let a = confidence_histogram(&t(n, 3, rows.concat()), SampleKind::OutOfDistribution).unwrap();
            let b = confidence_histogram(&t(n, 3, shuffled.concat()), SampleKind::OutOfDistribution).unwrap();
            prop_assert_eq!(a.total(), n as u64);
            prop_assert_eq!(a, b);
        }
    }
}
