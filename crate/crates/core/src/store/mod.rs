//! Persistence: POEM weight artifacts and the pool manifest.

pub mod poem;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consolidate::{ExpertPool, PoolExpert, PoolHyperparams, TaskModel};
use crate::data::{DatasetSource, Normalization};
use crate::error::{PoeError, Result};
use crate::netzoo::{build_blocknet, weights_digest, Accounting, BlockNet, BranchedModel, Head, LibrarySplit, Visit};
use crate::task::TaskUniverse;
use crate::tensor::Tensor;

pub use poem::{BranchMeta, Header, Role, TensorEntry};

/// Hex SHA-256 of raw bytes; artifact ids are this over the whole file.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect(m: &impl Visit) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, slot| out.push((name.to_string(), slot.tensor().clone())));
    out
}

/// Overwrites every slot of `m` from `tensors`, which must list exactly the
/// same names and shapes in visiting order.
fn fill(m: &mut impl Visit, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut it = tensors.into_iter();
    let mut err = None;
    m.visit_mut("", &mut |name, mut slot| {
        if err.is_some() {
            return;
        }
        match it.next() {
            Some((n, t)) if n == name && t.shape() == slot.tensor_mut().shape() => *slot.tensor_mut() = t,
            Some((n, t)) => {
                err = Some(PoeError::Format(format!("expected `{name}`, found `{n}` {:?}", t.shape())));
            }
            None => err = Some(PoeError::Format(format!("missing tensor `{name}`"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some((n, _)) = it.next() {
        return Err(PoeError::Format(format!("unexpected tensor `{n}`")));
    }
    Ok(())
}

/// Anything that can be written as a POEM artifact.
#[derive(Debug, Clone)]
pub enum Component {
    /// A whole network, oracle or student.
    Net(Role, BlockNet),
    Library(LibrarySplit),
    Expert(PoolExpert, crate::netzoo::ArchConfig),
    TaskModel(TaskModel),
}

fn header(role: Role, arch: crate::netzoo::ArchConfig) -> Header {
    Header {
        role,
        arch,
        tensors: vec![],
        library_digest: None,
        branches: vec![],
        config_digest: None,
        class_names: vec![],
    }
}

fn skeleton_head(arch: &crate::netzoo::ArchConfig, widen_special: f64, classes: usize) -> Head {
    Head::seeded(arch.conv3_channels(), &arch.with_head(widen_special, classes), 0)
}

impl Component {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            Component::Net(role, net) => poem::encode(header(*role, net.cfg), &collect(net)),
            Component::Library(split) => poem::encode(header(Role::Library, split.head_template), &collect(split)),
            Component::Expert(e, arch) => {
                let mut h = header(Role::Expert, *arch);
                h.library_digest = Some(e.library_digest.clone());
                h.config_digest = Some(e.config_digest.clone());
                h.branches = vec![BranchMeta { task: e.task.clone(), classes: e.classes.clone(), widen_special: e.widen_special }];
                poem::encode(h, &collect(&e.head))
            }
            Component::TaskModel(tm) => {
                let m = &tm.model;
                let mut h = header(Role::TaskModel, m.split.head_template);
                h.library_digest = Some(weights_digest(&m.split));
                let blocks = m.blocks();
                h.branches = tm
                    .tasks
                    .iter()
                    .zip(&m.branches)
                    .zip(blocks)
                    .map(|((task, head), range)| BranchMeta {
                        task: task.clone(),
                        classes: m.class_map[range].to_vec(),
                        widen_special: head_widen(head, &m.split),
                    })
                    .collect();
                h.class_names = tm.class_names.clone();
                poem::encode(h, &collect(m))
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, tensors) = poem::decode(bytes)?;
        h.arch.validate()?;
        match h.role {
            Role::Oracle | Role::Student => {
                let mut net = build_blocknet(&h.arch, 0)?;
                fill(&mut net, tensors)?;
                Ok(Component::Net(h.role, net))
            }
            Role::Library => {
                let mut split = crate::netzoo::split_library(&build_blocknet(&h.arch, 0)?);
                fill(&mut split, tensors)?;
                Ok(Component::Library(split))
            }
            Role::Expert => {
                let [b] = h.branches.as_slice() else {
                    return Err(PoeError::Format("expert artifact must describe one branch".into()));
                };
                let mut head = skeleton_head(&h.arch, b.widen_special, b.classes.len());
                fill(&mut head, tensors)?;
                let expert = PoolExpert {
                    task: b.task.clone(),
                    classes: b.classes.clone(),
                    widen_special: b.widen_special,
                    head,
                    library_digest: h.library_digest.clone().unwrap_or_default(),
                    config_digest: h.config_digest.clone().unwrap_or_default(),
                    bytes: Some(bytes.len() as u64),
                };
                Ok(Component::Expert(expert, h.arch))
            }
            Role::TaskModel => {
                if h.branches.is_empty() {
                    return Err(PoeError::Format("task model without branches".into()));
                }
                let split = crate::netzoo::split_library(&build_blocknet(&h.arch, 0)?);
                let heads = h.branches.iter().map(|b| skeleton_head(&h.arch, b.widen_special, b.classes.len())).collect();
                let maps: Vec<Vec<usize>> = h.branches.iter().map(|b| b.classes.clone()).collect();
                let mut model = BranchedModel::new(split, heads, &maps)?;
                fill(&mut model, tensors)?;
                if h.class_names.len() != model.class_map.len() {
                    return Err(PoeError::Format("class names do not match the unified logit".into()));
                }
                let params = model.count_params();
                let flops = model.count_flops(model.input());
                Ok(Component::TaskModel(TaskModel {
                    model,
                    tasks: h.branches.iter().map(|b| b.task.clone()).collect(),
                    class_names: h.class_names,
                    params,
                    flops,
                    assembly_seconds: 0.0,
                }))
            }
        }
    }
}

/// The widening factor that reproduces `head`'s conv4 width under `split`.
fn head_widen(head: &Head, split: &LibrarySplit) -> f64 {
    let width = head.conv4.out_channels();
    // conv4 = round(64·k); k = width/64 reproduces it exactly.
    let k = width as f64 / 64.0;
    debug_assert_eq!(split.expert_arch(k, 1).conv4_channels(), width);
    k
}

/// Writes `c` to `path`; returns the byte size.
pub fn save_artifact(c: &Component, path: &Path) -> Result<u64> {
    let bytes = c.to_bytes()?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_artifact(path: &Path) -> Result<Component> {
    Component::from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    /// SHA-256 of the file.
    pub digest: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Creation {
    pub tool: String,
    pub version: String,
    pub seed: u64,
}

/// JSON description of a pool on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub universe: TaskUniverse,
    pub library: FileEntry,
    pub library_weights_digest: String,
    pub experts: BTreeMap<String, FileEntry>,
    pub hyperparams: PoolHyperparams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSource>,
    pub created: Creation,
}

fn write_entry(dir: &Path, name: &str, c: &Component) -> Result<FileEntry> {
    let bytes = c.to_bytes()?;
    fs::write(dir.join(name), &bytes)?;
    Ok(FileEntry { file: PathBuf::from(name), digest: sha256_hex(&bytes), bytes: bytes.len() as u64 })
}

/// Writes the library, every expert, and `pool.json` into `dir`. Byte sizes
/// are recorded on `pool`.
pub fn save_pool(
    pool: &mut ExpertPool,
    dir: &Path,
    normalization: Option<Normalization>,
    dataset: Option<DatasetSource>,
    seed: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let library = write_entry(dir, "library.poem", &Component::Library(pool.split.clone()))?;
    pool.library_bytes = Some(library.bytes);
    let mut experts = BTreeMap::new();
    for (id, e) in pool.experts.iter_mut() {
        let entry = write_entry(dir, &format!("expert-{id}.poem"), &Component::Expert(e.clone(), pool.hyper.arch))?;
        e.bytes = Some(entry.bytes);
        experts.insert(id.clone(), entry);
    }
    let manifest = PoolManifest {
        universe: pool.universe.clone(),
        library,
        library_weights_digest: pool.library_digest.clone(),
        experts,
        hyperparams: pool.hyper.clone(),
        normalization,
        dataset,
        created: Creation { tool: "poe".into(), version: env!("CARGO_PKG_VERSION").into(), seed },
    };
    let path = dir.join("pool.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

fn read_entry(dir: &Path, e: &FileEntry) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(&e.file))?;
    let found = sha256_hex(&bytes);
    if found != e.digest {
        return Err(PoeError::DigestMismatch { expected: e.digest.clone(), found });
    }
    Ok(bytes)
}

/// Loads and verifies a pool: every file must match its recorded digest and
/// every expert must reference the library's weights.
pub fn load_pool(manifest_path: &Path) -> Result<(ExpertPool, PoolManifest)> {
    let manifest: PoolManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let Component::Library(split) = Component::from_bytes(&read_entry(dir, &manifest.library)?)? else {
        return Err(PoeError::Format("library entry is not a library artifact".into()));
    };
    let found = weights_digest(&split);
    if found != manifest.library_weights_digest {
        return Err(PoeError::DigestMismatch { expected: manifest.library_weights_digest.clone(), found });
    }
    let mut experts = Vec::new();
    for (id, entry) in &manifest.experts {
        let Component::Expert(e, _) = Component::from_bytes(&read_entry(dir, entry)?)? else {
            return Err(PoeError::Format(format!("entry `{id}` is not an expert artifact")));
        };
        if &e.task != id {
            return Err(PoeError::Format(format!("entry `{id}` holds the expert for `{}`", e.task)));
        }
        experts.push(e);
    }
    let mut pool = ExpertPool::new(manifest.universe.clone(), split, experts, manifest.hyperparams.clone())?;
    pool.library_bytes = Some(manifest.library.bytes);
    Ok((pool, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consolidate::{assemble, pool_volume, CompositeQuery};
    use crate::distill::CkdTerms;
    use crate::netzoo::{split_library, ArchConfig, InputShape};
    use crate::par::Exec;
    use crate::task::PrimitiveTask;

    fn pool() -> ExpertPool {
        let arch = ArchConfig::new(10, 0.5, 0.5, 5, InputShape::new(3, 8, 8)).unwrap();
        let split = split_library(&build_blocknet(&arch, 2).unwrap());
        let digest = weights_digest(&split);
        let tasks = [("a", vec![0, 1]), ("b", vec![2, 3, 4])];
        let experts = tasks.iter().enumerate().map(|(i, (id, c))| PoolExpert {
            task: id.to_string(),
            classes: c.clone(),
            widen_special: 0.25,
            head: split.new_head(0.25, c.len(), i as u64),
            library_digest: digest.clone(),
            config_digest: "x".into(),
            bytes: None,
        }).collect::<Vec<_>>();
        let prims = tasks
            .iter()
            .map(|(id, c)| PrimitiveTask { id: id.to_string(), name: id.to_string(), class_indices: c.clone() })
            .collect();
        let universe = TaskUniverse::new((0..5).map(|c| c.to_string()).collect(), prims).unwrap();
        let hyper = PoolHyperparams { temperature: 4.0, alpha: 0.3, terms: CkdTerms::Both, arch, widen_special: 0.25 };
        ExpertPool::new(universe, split, experts, hyper).unwrap()
    }

    #[test]
    fn net_round_trip_reproduces_outputs() {
        let arch = ArchConfig::new(10, 0.5, 0.25, 3, InputShape::new(3, 8, 8)).unwrap();
        let net = build_blocknet(&arch, 5).unwrap();
        let bytes = Component::Net(Role::Oracle, net.clone()).to_bytes().unwrap();
        let Component::Net(Role::Oracle, back) = Component::from_bytes(&bytes).unwrap() else { panic!() };
        assert_eq!(weights_digest(&back), weights_digest(&net));
        let x = Tensor::full(&[2, 3, 8, 8], 0.3);
        assert_eq!(
            net.predict(&x, 2, Exec::Sequential).unwrap().data(),
            back.predict(&x, 2, Exec::Sequential).unwrap().data()
        );
        assert_eq!(Component::Net(Role::Oracle, back).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn pool_round_trip_and_volume() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pool();
        assert!(pool_volume(&p).is_err());
        let path = save_pool(&mut p, dir.path(), None, None, 0).unwrap();
        let (back, manifest) = load_pool(&path).unwrap();
        assert_eq!(back.library_digest, p.library_digest);
        let v = pool_volume(&back).unwrap();
        let on_disk: u64 = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "poem"))
            .map(|p| fs::metadata(p).unwrap().len())
            .sum();
        assert_eq!(v.pool_total_bytes, on_disk as f64);
        assert_eq!(manifest.experts["a"].bytes, back.experts["a"].bytes.unwrap());

        let q = CompositeQuery::parse("b,a").unwrap();
        let m1 = Component::TaskModel(assemble(&p, &q).unwrap()).to_bytes().unwrap();
        let m2 = Component::TaskModel(assemble(&back, &q).unwrap()).to_bytes().unwrap();
        assert_eq!(sha256_hex(&m1), sha256_hex(&m2));
    }

    #[test]
    fn task_model_round_trip() {
        let p = pool();
        let tm = assemble(&p, &CompositeQuery::parse("b,a").unwrap()).unwrap();
        let bytes = Component::TaskModel(tm.clone()).to_bytes().unwrap();
        let Component::TaskModel(back) = Component::from_bytes(&bytes).unwrap() else { panic!() };
        assert_eq!(back.class_map(), tm.class_map());
        assert_eq!(back.tasks, tm.tasks);
        assert_eq!(back.params, tm.params);
        assert_eq!(Component::TaskModel(back).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn tampered_files_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pool();
        let path = save_pool(&mut p, dir.path(), None, None, 0).unwrap();
        let f = dir.path().join("expert-a.poem");
        let mut bytes = fs::read(&f).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        fs::write(&f, &bytes).unwrap();
        assert!(matches!(load_pool(&path), Err(PoeError::DigestMismatch { .. })));
        assert!(matches!(load_artifact(&f), Err(PoeError::Crc { .. })));
    }

    #[test]
    fn mismatched_tensor_lists_are_format_errors() {
        let p = pool();
        let mut t = collect(&p.split);
        t.pop();
        let bytes = poem::encode(header(Role::Library, p.hyper.arch), &t).unwrap();
        assert!(matches!(Component::from_bytes(&bytes), Err(PoeError::Format(_))));
    }
}
