//! `poe` subcommands. Every run prints one JSON run record on stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use poe_core::consolidate::{assemble, pool_volume, CompositeQuery, ExpertPool, PoolExpert, PoolHyperparams};
use poe_core::data::{Dataset, DatasetSource, Splits, SynthConfig};
use poe_core::distill::{
    distill_library, extract_experts, train_oracle, CkdTerms, DistillConfig, Features, Teacher, TrainConfig,
    INFER_BATCH,
};
use poe_core::eval::{render_table, run_desk, task_specific_accuracy, DeskConfig, EvalReport, TaskScore};
use poe_core::netzoo::{Accounting, ArchConfig, BlockNet, LibrarySplit};
use poe_core::par::Exec;
use poe_core::store::{load_artifact, load_pool, save_artifact, save_pool, sha256_hex, Component, Role};
use poe_core::task::TaskUniverse;
use poe_core::tensor::SgdConfig;
use poe_core::PoeError;

#[derive(Debug, Parser)]
#[command(name = "poe", version, about = "Pool-of-experts pipeline: train, distill, extract, assemble, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random draw of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the run record to this file.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig { learning_rate: self.lr, ..Default::default() },
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TermsArg {
    Both,
    SoftOnly,
    ScaleOnly,
}

impl From<TermsArg> for CkdTerms {
    fn from(t: TermsArg) -> Self {
        match t {
            TermsArg::Both => CkdTerms::Both,
            TermsArg::SoftOnly => CkdTerms::SoftOnly,
            TermsArg::ScaleOnly => CkdTerms::ScaleOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset description and its task partition.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        classes_per_task: usize,
        #[arg(long, default_value_t = 60)]
        train_per_class: usize,
        #[arg(long, default_value_t = 40)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 8)]
        image_size: usize,
        #[arg(long)]
        noise: Option<f32>,
        #[arg(long)]
        class_strength: Option<f32>,
    },
    /// Train the generic oracle with cross-entropy.
    TrainOracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        depth: usize,
        #[arg(long, default_value_t = 2.0)]
        widen: f64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Distill the student from the oracle and keep its library.
    DistillLibrary {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        depth: usize,
        #[arg(long, default_value_t = 1.0)]
        widen: f64,
        #[arg(long, default_value_t = 4.0)]
        temperature: f32,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Extract one expert per primitive task on the frozen library.
    ExtractExperts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        library: PathBuf,
        /// Task partition; defaults to the dataset's own.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        widen_special: f64,
        #[arg(long, default_value_t = 4.0)]
        temperature: f32,
        #[arg(long, default_value_t = 0.3)]
        alpha: f32,
        #[arg(long, value_enum, default_value = "both")]
        terms: TermsArg,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Collect a library and its experts into a verified pool directory.
    BuildPool {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        library: PathBuf,
        /// Output directory of `extract-experts`.
        #[arg(long)]
        experts: PathBuf,
        /// Dataset whose normalization the pool records.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble the model for a composite task.
    Query {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        /// Comma-separated primitive task ids, in logit order.
        #[arg(long)]
        tasks: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task-specific accuracy of a model on a dataset's eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the desk experiment.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Desk configuration JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run sequentially even when the parallel backend is built in.
        #[arg(long)]
        sequential: bool,
    },
    /// Serve a pool over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = crate::server::DEFAULT_CACHE)]
        cache: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::TrainOracle { .. } => "train-oracle",
            Command::DistillLibrary { .. } => "distill-library",
            Command::ExtractExperts { .. } => "extract-experts",
            Command::BuildPool { .. } => "build-pool",
            Command::Query { .. } => "query",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Serve { .. } => "serve",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenSynth { common, .. }
            | Command::TrainOracle { common, .. }
            | Command::DistillLibrary { common, .. }
            | Command::ExtractExperts { common, .. }
            | Command::BuildPool { common, .. }
            | Command::Query { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. }
            | Command::Serve { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ExitStatus {
    Ok = 0,
    Validation = 1,
    Runtime = 2,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<PoeError> for CliError {
    fn from(e: PoeError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn invalid<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Validation(msg.into()))
}

/// What every subcommand prints on completion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub status: String,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Value,
}

/// Runs one subcommand; the return value is the process exit status.
pub fn run(cli: Cli) -> ExitStatus {
    let started = Instant::now();
    let name = cli.command.name();
    let common = cli.command.common().clone();
    let result = dispatch(cli.command);
    let (status, outputs, error) = match result {
        Ok(v) => (ExitStatus::Ok, v, None),
        Err(e) => {
            eprintln!("poe {name}: {e}");
            let code = match e {
                CliError::Validation(_) => ExitStatus::Validation,
                CliError::Runtime(_) => ExitStatus::Runtime,
            };
            (code, Value::Null, Some(e.to_string()))
        }
    };
    let record = RunRecord {
        command: name.into(),
        seed: common.seed,
        status: if status == ExitStatus::Ok { "ok".into() } else { "error".into() },
        seconds: started.elapsed().as_secs_f64(),
        error,
        outputs,
    };
    let text = serde_json::to_string(&record).expect("record serializes");
    println!("{text}");
    if let Some(path) = &common.record {
        if let Err(e) = fs::write(path, &text) {
            eprintln!("poe {name}: cannot write run record: {e}");
            return ExitStatus::Runtime;
        }
    }
    status
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn load_data(path: &Path) -> CliResult<Splits> {
    let src: DatasetSource = read_json(path)?;
    Ok(src.load()?)
}

fn load_net(path: &Path) -> CliResult<BlockNet> {
    match load_artifact(path)? {
        Component::Net(_, net) => Ok(net),
        _ => invalid(format!("{} is not a whole-network artifact", path.display())),
    }
}

fn load_library(path: &Path) -> CliResult<LibrarySplit> {
    match load_artifact(path)? {
        Component::Library(split) => Ok(split),
        _ => invalid(format!("{} is not a library artifact", path.display())),
    }
}

fn accuracy(net: &BlockNet, data: &Dataset) -> CliResult<f32> {
    let pred = net.predict(&data.images, INFER_BATCH, Exec::Parallel)?.argmax_rows();
    Ok(pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f32 / data.len() as f32)
}

fn artifact_summary(path: &Path) -> CliResult<Value> {
    let bytes = fs::read(path)?;
    Ok(json!({ "path": path, "bytes": bytes.len(), "model_id": sha256_hex(&bytes) }))
}

/// Written by `extract-experts`, read by `build-pool`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Extraction {
    pub universe: TaskUniverse,
    pub hyperparams: PoolHyperparams,
    pub experts: BTreeMap<String, PathBuf>,
    pub dataset: DatasetSource,
}

const EXTRACTION_FILE: &str = "extraction.json";

fn dispatch(cmd: Command) -> CliResult<Value> {
    match cmd {
        Command::GenSynth { common, out, classes, classes_per_task, train_per_class, eval_per_class, image_size, noise, class_strength } => {
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                seed: common.seed,
                num_classes: classes,
                classes_per_task,
                train_per_class,
                eval_per_class,
                image_size,
                noise: noise.unwrap_or(d.noise),
                class_strength: class_strength.unwrap_or(d.class_strength),
                ..d
            };
            cfg.validate()?;
            let src = DatasetSource::Synthetic(cfg);
            let splits = src.load()?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("data.json"), &src)?;
            splits.universe.save(&out.join("tasks.json"))?;
            Ok(json!({
                "data": out.join("data.json"),
                "tasks": out.join("tasks.json"),
                "train": splits.train.len(),
                "eval": splits.eval.len(),
                "classes": splits.universe.num_classes(),
                "primitives": splits.universe.primitives.len(),
            }))
        }
        Command::TrainOracle { common, data, out, depth, widen, train } => {
            let s = load_data(&data)?;
            let arch = ArchConfig::new(depth, widen, widen, s.train.num_classes, s.train.shape())?;
            let (net, log) = train_oracle(&arch, &s.train, &train.config(common.seed), None)?;
            save_artifact(&Component::Net(Role::Oracle, net.clone()), &out)?;
            Ok(json!({
                "artifact": artifact_summary(&out)?,
                "eval_accuracy": accuracy(&net, &s.eval)?,
                "params": net.count_params(),
                "train_seconds": log.seconds(),
            }))
        }
        Command::DistillLibrary { common, data, oracle, out, depth, widen, temperature, train } => {
            let s = load_data(&data)?;
            let oracle = load_net(&oracle)?;
            let arch = ArchConfig::new(depth, widen, widen, s.train.num_classes, s.train.shape())?;
            let teacher = Teacher::from_oracle(&oracle, &s.train.images, Exec::Parallel)?;
            let dc = DistillConfig { temperature, train: train.config(common.seed), ..Default::default() };
            let (split, student, log) = distill_library(&arch, &teacher, &s.train, &dc, None)?;
            save_artifact(&Component::Library(split.clone()), &out)?;
            Ok(json!({
                "artifact": artifact_summary(&out)?,
                "student_eval_accuracy": accuracy(&student, &s.eval)?,
                "library_params": split.count_params(),
                "train_seconds": log.seconds(),
            }))
        }
        Command::ExtractExperts { common, data, oracle, library, tasks, out_dir, widen_special, temperature, alpha, terms, train } => {
            let src: DatasetSource = read_json(&data)?;
            let s = src.load()?;
            let universe = match tasks {
                Some(p) => TaskUniverse::load(&p)?,
                None => s.universe.clone(),
            };
            if universe.num_classes() != s.train.num_classes {
                return invalid("task partition and dataset disagree on the class count");
            }
            let oracle = load_net(&oracle)?;
            let split = load_library(&library)?;
            let teacher = Teacher::from_oracle(&oracle, &s.train.images, Exec::Parallel)?;
            let features = Features::compute(&split, &s.train.images, Exec::Parallel)?;
            let dc = DistillConfig { temperature, alpha, terms: terms.into(), train: train.config(common.seed) };
            let records = extract_experts(&split, &features, &teacher, &universe.primitives, widen_special, &dc, Exec::Parallel)?;
            fs::create_dir_all(&out_dir)?;
            let arch = split.head_template;
            let mut experts = BTreeMap::new();
            let mut sizes = BTreeMap::new();
            for r in records {
                let file = PathBuf::from(format!("expert-{}.poem", r.task));
                let seconds = r.log.seconds();
                let bytes = save_artifact(&Component::Expert(PoolExpert::from(r.clone()), arch), &out_dir.join(&file))?;
                sizes.insert(r.task.clone(), json!({ "bytes": bytes, "train_seconds": seconds }));
                experts.insert(r.task, file);
            }
            let hyperparams = PoolHyperparams { temperature, alpha, terms: terms.into(), arch, widen_special };
            write_json(&out_dir.join(EXTRACTION_FILE), &Extraction { universe, hyperparams, experts, dataset: src })?;
            Ok(json!({ "out_dir": out_dir, "experts": sizes }))
        }
        Command::BuildPool { common, library, experts, data, out } => {
            let ex: Extraction = read_json(&experts.join(EXTRACTION_FILE))?;
            let split = load_library(&library)?;
            let mut loaded = Vec::new();
            for (id, file) in &ex.experts {
                match load_artifact(&experts.join(file))? {
                    Component::Expert(e, _) if &e.task == id => loaded.push(e),
                    _ => return invalid(format!("{} is not the expert for `{id}`", file.display())),
                }
            }
            let mut pool = ExpertPool::new(ex.universe, split, loaded, ex.hyperparams)?;
            let source = match data {
                Some(p) => read_json(&p)?,
                None => ex.dataset,
            };
            let normalization = source.load()?.normalization;
            let manifest = save_pool(&mut pool, &out, Some(normalization), Some(source), common.seed)?;
            let volume = pool_volume(&pool)?;
            Ok(json!({ "manifest": manifest, "volume": volume }))
        }
        Command::Query { pool, tasks, out, .. } => {
            let (pool, _) = load_pool(&pool)?;
            let q = CompositeQuery::parse(&tasks)?;
            let started = Instant::now();
            let tm = assemble(&pool, &q)?;
            let bytes = Component::TaskModel(tm.clone()).to_bytes()?;
            let assembly_ms = started.elapsed().as_secs_f64() * 1e3;
            fs::write(&out, &bytes)?;
            Ok(json!({
                "model_id": sha256_hex(&bytes),
                "path": out,
                "bytes": bytes.len(),
                "classes": tm.class_names,
                "params": tm.params,
                "flops": tm.flops,
                "assembly_ms": assembly_ms,
            }))
        }
        Command::Eval { model, data, report, .. } => {
            let s = load_data(&data)?;
            let started = Instant::now();
            let (logits, class_map, tasks, params, flops) = match load_artifact(&model)? {
                Component::TaskModel(tm) => {
                    let logits = tm.model.predict(&s.eval.images, INFER_BATCH, Exec::Parallel)?;
                    (logits, tm.model.class_map.clone(), tm.tasks.join(","), tm.params, tm.flops)
                }
                Component::Net(_, net) => {
                    let logits = net.predict(&s.eval.images, INFER_BATCH, Exec::Parallel)?;
                    let all: Vec<usize> = (0..net.cfg.num_classes).collect();
                    (logits, all, "all".to_string(), net.count_params(), net.count_flops(net.cfg.input))
                }
                _ => return invalid("only task models and whole networks can be evaluated alone"),
            };
            if class_map.iter().any(|&c| c >= s.eval.num_classes) {
                return invalid("model covers classes the dataset does not have");
            }
            let acc = task_specific_accuracy(&logits, &s.eval.labels, &class_map, &class_map)?;
            let r = EvalReport::new(
                model.display().to_string(),
                None,
                vec![TaskScore { task: tasks, accuracy: acc }],
                params,
                flops,
                started.elapsed().as_secs_f64(),
            )?;
            if let Some(p) = &report {
                write_json(p, &r)?;
            }
            eprint!("{}", render_table(std::slice::from_ref(&r)));
            Ok(serde_json::to_value(&r)?)
        }
        Command::Bench { common, config, report, sequential } => {
            let mut cfg: DeskConfig = match config {
                Some(p) => read_json(&p)?,
                None => DeskConfig { seeds: vec![common.seed], ..Default::default() },
            };
            if sequential {
                cfg.exec = Exec::Sequential;
            }
            let r = run_desk(&cfg)?;
            for s in &r.seeds {
                eprint!("{}{}{}", render_table(&s.primitive), render_table(&s.ablation), render_table(&s.joint));
            }
            if let Some(p) = &report {
                write_json(p, &r)?;
            }
            let seeds: Vec<Value> = r
                .seeds
                .iter()
                .map(|s| json!({ "seed": s.seed, "seconds": s.seconds, "primitive": s.primitive }))
                .collect();
            Ok(json!({ "report": report, "seeds": seeds }))
        }
        Command::Serve { pool, bind, cache, .. } => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(crate::server::serve(pool, &bind, cache))?;
            Ok(json!({ "bind": bind }))
        }
    }
}
