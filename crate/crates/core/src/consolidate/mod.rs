//! Train-free consolidation: the expert pool, logit-concatenation assembly of
//! task models, and storage accounting.

mod volume;

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distill::{CkdTerms, ExpertRecord};
use crate::error::{invalid, PoeError, Result};
use crate::netzoo::{weights_digest, Accounting, ArchConfig, BranchedModel, Head, LibrarySplit};
use crate::task::TaskUniverse;
use crate::tensor::Tensor;

pub use volume::{exhaustive_estimate, format_binary, format_decimal, pool_volume, VolumeReport, KIB};

/// An ordered set of primitive-task ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositeQuery {
    task_ids: Vec<String>,
}

impl CompositeQuery {
    pub fn new<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self> {
        let task_ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        if task_ids.is_empty() {
            return invalid("a query needs at least one task");
        }
        let mut seen = HashSet::new();
        for id in &task_ids {
            if !seen.insert(id) {
                return invalid(format!("task `{id}` appears twice in the query"));
            }
        }
        Ok(Self { task_ids })
    }

    /// Comma-separated ids, e.g. `"t0,t3"`.
    pub fn parse(s: &str) -> Result<Self> {
        Self::new(s.split(',').map(str::trim).filter(|t| !t.is_empty()))
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    /// Number of primitive tasks in the query.
    pub fn n(&self) -> usize {
        self.task_ids.len()
    }

    /// Union of the tasks' classes in query order.
    pub fn classes(&self, universe: &TaskUniverse) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for id in &self.task_ids {
            out.extend_from_slice(&universe.task(id)?.class_indices);
        }
        Ok(out)
    }
}

/// Settings every expert in a pool was extracted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolHyperparams {
    pub temperature: f32,
    pub alpha: f32,
    pub terms: CkdTerms,
    /// The student architecture the library was cut from.
    pub arch: ArchConfig,
    pub widen_special: f64,
}

/// One expert as held by a pool.
#[derive(Debug, Clone)]
pub struct PoolExpert {
    pub task: String,
    pub classes: Vec<usize>,
    pub widen_special: f64,
    pub head: Head,
    pub library_digest: String,
    pub config_digest: String,
    /// Serialized size, known once the expert has been saved or loaded.
    pub bytes: Option<u64>,
}

impl From<ExpertRecord> for PoolExpert {
    fn from(r: ExpertRecord) -> Self {
        Self {
            task: r.task,
            classes: r.classes,
            widen_special: r.widen_special,
            head: r.head,
            library_digest: r.library_digest,
            config_digest: r.config_digest,
            bytes: None,
        }
    }
}

/// The shared library and one expert per primitive task.
#[derive(Debug, Clone)]
pub struct ExpertPool {
    pub universe: TaskUniverse,
    pub split: LibrarySplit,
    pub library_digest: String,
    pub library_bytes: Option<u64>,
    pub experts: BTreeMap<String, PoolExpert>,
    pub hyper: PoolHyperparams,
}

impl ExpertPool {
    /// Checks that every expert belongs to a task of `universe`, matches its
    /// width, and was extracted against this library.
    pub fn new(
        universe: TaskUniverse,
        split: LibrarySplit,
        experts: impl IntoIterator<Item = PoolExpert>,
        hyper: PoolHyperparams,
    ) -> Result<Self> {
        universe.validate()?;
        let library_digest = weights_digest(&split);
        let mut map = BTreeMap::new();
        for e in experts {
            let task = universe.task(&e.task)?;
            if e.classes != task.class_indices || e.head.num_outputs() != task.len() {
                return Err(PoeError::Shape(format!(
                    "expert `{}` covers {} classes, task has {}",
                    e.task,
                    e.head.num_outputs(),
                    task.len()
                )));
            }
            if e.library_digest != library_digest {
                return Err(PoeError::DigestMismatch { expected: library_digest, found: e.library_digest });
            }
            if !split.accepts(&e.head) {
                return Err(PoeError::Shape(format!("expert `{}` does not fit the library", e.task)));
            }
            if map.insert(e.task.clone(), e).is_some() {
                return invalid("two experts for the same task");
            }
        }
        Ok(Self { universe, split, library_digest, library_bytes: None, experts: map, hyper })
    }

    pub fn expert(&self, id: &str) -> Result<&PoolExpert> {
        self.experts.get(id).ok_or_else(|| PoeError::UnknownTask(id.to_string()))
    }

    pub fn check_query(&self, q: &CompositeQuery) -> Result<()> {
        for id in q.task_ids() {
            self.expert(id)?;
        }
        Ok(())
    }
}

/// An assembled classifier for a composite task.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub model: BranchedModel,
    pub tasks: Vec<String>,
    pub class_names: Vec<String>,
    pub params: usize,
    pub flops: u64,
    pub assembly_seconds: f64,
}

impl TaskModel {
    /// Global class of every unified-logit position.
    pub fn class_map(&self) -> &[usize] {
        &self.model.class_map
    }
}

/// Wires the pool's library to the queried experts, in query order. No
/// gradient is computed and no parameter changes.
pub fn assemble(pool: &ExpertPool, q: &CompositeQuery) -> Result<TaskModel> {
    let start = Instant::now();
    let mut heads = Vec::with_capacity(q.n());
    let mut maps = Vec::with_capacity(q.n());
    for id in q.task_ids() {
        let e = pool.expert(id)?;
        if e.library_digest != pool.library_digest {
            return Err(PoeError::DigestMismatch {
                expected: pool.library_digest.clone(),
                found: e.library_digest.clone(),
            });
        }
        heads.push(e.head.clone());
        maps.push(e.classes.clone());
    }
    let model = BranchedModel::new(pool.split.clone(), heads, &maps)?;
    let class_names = model.class_map.iter().map(|&c| pool.universe.classes[c].clone()).collect();
    let params = model.count_params();
    let flops = model.count_flops(model.input());
    Ok(TaskModel {
        model,
        tasks: q.task_ids().to_vec(),
        class_names,
        params,
        flops,
        assembly_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Order-preserving concatenation of 1-D logit vectors, with no rescaling.
pub fn concat_logits(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return invalid("nothing to concatenate");
    }
    let mut out = Vec::new();
    for p in parts {
        if p.rank() != 1 || p.is_empty() {
            return Err(PoeError::Shape(format!("sub-logit must be a nonempty vector, got {:?}", p.shape())));
        }
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument;
    use crate::netzoo::{build_blocknet, split_library, InputShape};
    use crate::par::Exec;
    use crate::tensor::{argmax, softmax};
    use rand::Rng as _;

    const IN: InputShape = InputShape::new(3, 8, 8);

    pub(crate) fn toy_pool(sizes: &[usize]) -> ExpertPool {
        let total: usize = sizes.iter().sum();
        let arch = ArchConfig::new(10, 0.5, 0.5, total, IN).unwrap();
        let split = split_library(&build_blocknet(&arch, 1).unwrap());
        let digest = weights_digest(&split);
        let mut start = 0;
        let mut prims = Vec::new();
        let mut experts = Vec::new();
        for (i, &s) in sizes.iter().enumerate() {
            let classes: Vec<usize> = (start..start + s).collect();
            start += s;
            experts.push(PoolExpert {
                task: format!("t{i}"),
                classes: classes.clone(),
                widen_special: 0.25,
                head: split.new_head(0.25, s, 10 + i as u64),
                library_digest: digest.clone(),
                config_digest: "cfg".into(),
                bytes: None,
            });
            prims.push(crate::task::PrimitiveTask { id: format!("t{i}"), name: format!("t{i}"), class_indices: classes });
        }
        let universe = TaskUniverse::new((0..total).map(|c| format!("c{c}")).collect(), prims).unwrap();
        let hyper = PoolHyperparams { temperature: 4.0, alpha: 0.3, terms: CkdTerms::Both, arch, widen_special: 0.25 };
        ExpertPool::new(universe, split, experts, hyper).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Tensor {
        let mut r = crate::rng::stream(seed, 0);
        Tensor::new(vec![n, 3, 8, 8], (0..n * IN.numel()).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn query_validation() {
        assert!(CompositeQuery::new(Vec::<String>::new()).is_err());
        assert!(CompositeQuery::parse("a,a").is_err());
        assert_eq!(CompositeQuery::parse("a, b").unwrap().task_ids(), ["a", "b"]);
        let pool = toy_pool(&[2, 3]);
        assert!(matches!(assemble(&pool, &CompositeQuery::parse("t0,nope").unwrap()), Err(PoeError::UnknownTask(_))));
    }

    #[test]
    fn layout_follows_query_order() {
        let pool = toy_pool(&[4, 6]);
        let m = assemble(&pool, &CompositeQuery::parse("t0,t1").unwrap()).unwrap();
        assert_eq!(m.class_map(), (0..10).collect::<Vec<_>>());
        let m = assemble(&pool, &CompositeQuery::parse("t1,t0").unwrap()).unwrap();
        assert_eq!(m.class_map()[..6], [4, 5, 6, 7, 8, 9]);
        assert_eq!(m.params, pool.split.count_params() + pool.experts.values().map(|e| e.head.count_params()).sum::<usize>());
    }

    #[test]
    fn assembly_never_trains() {
        let pool = toy_pool(&[2, 3, 4]);
        let (m, counters) = instrument::measure(|| assemble(&pool, &CompositeQuery::parse("t2,t0,t1").unwrap()));
        assert!(m.is_ok());
        assert!(counters.is_zero(), "{counters:?}");
    }

    #[test]
    fn single_branch_matches_standalone_expert() {
        let pool = toy_pool(&[3, 2]);
        let m = assemble(&pool, &CompositeQuery::parse("t1").unwrap()).unwrap();
        let x = inputs(4, 3);
        let unified = m.model.predict(&x, 4, Exec::Sequential).unwrap();
        let feats = pool.split.features(&x, 4, Exec::Sequential).unwrap();
        let alone = pool.experts["t1"].head.logits(&feats).unwrap();
        for r in 0..4 {
            assert_eq!(softmax(unified.row(r)).unwrap(), softmax(alone.row(r)).unwrap());
        }
    }

    #[test]
    fn permuting_the_query_keeps_predicted_classes() {
        let pool = toy_pool(&[2, 3, 2]);
        let x = inputs(12, 4);
        let ids = ["t0", "t1", "t2"];
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut reference: Option<Vec<usize>> = None;
        for o in orders {
            let q = CompositeQuery::new(o.iter().map(|&i| ids[i])).unwrap();
            let m = assemble(&pool, &q).unwrap();
            let logits = m.model.predict(&x, 12, Exec::Sequential).unwrap();
            let pred: Vec<usize> = (0..12).map(|r| m.class_map()[argmax(logits.row(r))]).collect();
            match &reference {
                None => reference = Some(pred),
                Some(p) => assert_eq!(&pred, p),
            }
        }
    }

    #[test]
    fn foreign_experts_are_rejected() {
        let pool = toy_pool(&[2, 2]);
        let mut e = pool.experts["t0"].clone();
        e.library_digest = "0".repeat(64);
        let err = ExpertPool::new(pool.universe.clone(), pool.split.clone(), [e], pool.hyper.clone()).unwrap_err();
        assert!(matches!(err, PoeError::DigestMismatch { .. }));

        let mut tampered = pool.clone();
        tampered.experts.get_mut("t1").unwrap().library_digest = "f".repeat(64);
        assert!(matches!(
            assemble(&tampered, &CompositeQuery::parse("t1").unwrap()),
            Err(PoeError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn concat_is_plain_concatenation() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0]);
        assert_eq!(concat_logits(std::slice::from_ref(&a)).unwrap().data(), [1.0, 2.0]);
        assert_eq!(concat_logits(&[a, b]).unwrap().data(), [1.0, 2.0, 3.0]);
        assert!(concat_logits(&[]).is_err());
        assert!(concat_logits(&[Tensor::from_vec(vec![])]).is_err());
    }

    #[test]
    fn within_block_argmax_survives_concatenation() {
        let blocks = [vec![0.3f32, 2.0, -1.0], vec![5.0, 4.9], vec![-3.0, -2.0, -2.5, -9.0]];
        let joined = concat_logits(&blocks.iter().cloned().map(Tensor::from_vec).collect::<Vec<_>>()).unwrap();
        let probs = softmax(joined.data()).unwrap();
        let mut start = 0;
        for b in &blocks {
            assert_eq!(argmax(&probs[start..start + b.len()]), argmax(b));
            start += b.len();
        }
    }
}
