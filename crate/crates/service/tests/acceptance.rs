//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 10 and 11 are exact or property checks and gate the exit
//! status. Criteria 5-9 come from the desk experiment; their outcome is
//! reported but only gates the exit status when `POE_ACCEPTANCE_STRICT=1`.
//! Set `POE_DESK_REPORT=<path>` to score a saved desk report instead of
//! training one (the run takes tens of minutes on one core); a fresh run is
//! saved to `<target>/tmp/desk_report.json`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use poe_core::consolidate::{
    assemble, exhaustive_estimate, format_binary, CompositeQuery, ExpertPool, PoolExpert, PoolHyperparams,
    VolumeReport, KIB,
};
use poe_core::distill::{loss_ckd, loss_kd, loss_scale, loss_soft, CkdTerms};
use poe_core::eval::desk::{BOTH, CKD, CKD_JOINT, KD_GENERIC, POE, SCALE_ONLY, SCRATCH, SOFT_ONLY, TRANSFER};
use poe_core::eval::{run_desk, DeskConfig, DeskReport};
use poe_core::instrument;
use poe_core::netzoo::{build_blocknet, split_library, weights_digest, Accounting, ArchConfig, Head, InputShape};
use poe_core::oracle::{case_rng, loss_suite, op_suite, uniform, SUITE_TOL};
use poe_core::par::Exec;
use poe_core::store::{save_pool, sha256_hex, Component};
use poe_core::task::TaskUniverse;
use poe_core::tensor::{argmax, Tensor};
use poe_service::server::{serve_on, PredictResponse, QueryResponse};
use serde_json::{json, Value};

const DESK_INPUT: InputShape = InputShape::new(3, 8, 8);

struct Outcome {
    id: usize,
    gating: bool,
    pass: bool,
    detail: String,
}

fn main() {
    let strict = std::env::var("POE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut out = vec![
        gradients(),
        loss_identities(),
        volume_arithmetic(),
        parameter_accounting(),
    ];
    let desk = desk_report();
    out.extend([
        primitive_ordering(&desk),
        ood_confidence(&desk),
        ablation_ordering(&desk),
        joint_gap(&desk),
        train_free_latency(&desk),
    ]);
    for o in &mut out[4..] {
        o.gating = strict;
    }
    out.push(systems_suite());
    out.push(branch_consistency());

    out.sort_by_key(|o| o.id);
    for o in &out {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if o.gating || o.pass { "" } else { " (reported)" };
        println!("criterion {:>2}: {tag}{note} {}", o.id, o.detail);
    }
    if out.iter().any(|o| o.gating && !o.pass) {
        std::process::exit(1);
    }
}

fn outcome(id: usize, pass: bool, detail: String) -> Outcome {
    Outcome { id, gating: true, pass, detail }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f32, "");
    let mut cases = 0;
    for case in op_suite().into_iter().chain(loss_suite()) {
        let (err, _) = case.worst(0..50).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        if err > worst.0 {
            worst = (err, case.name);
        }
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        1,
        worst.0 < SUITE_TOL && secs < 60.0,
        format!("{cases} cases x 50 instances, max rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn loss_identities() -> Outcome {
    let mut worst = 0.0f32;
    let mut exact = true;
    for seed in 0..50 {
        let mut rng = case_rng(1000 + seed);
        let t = uniform(&mut rng, &[12], -4.0, 4.0).into_data();
        let s = uniform(&mut rng, &[12], -4.0, 4.0).into_data();
        let classes = [1, 4, 5, 9];
        let s_sub: Vec<f32> = classes.iter().map(|&c| s[c]).collect();
        let temp = 1.0 + seed as f32 % 4.0;

        let ckd0 = loss_ckd(&t, &s_sub, &classes, temp, 0.0).unwrap();
        let soft = loss_soft(&t, &s_sub, &classes, temp).unwrap();
        exact &= ckd0 == soft;

        let all: Vec<usize> = (0..12).collect();
        let full = loss_soft(&t, &s, &all, temp).unwrap();
        worst = worst.max((full - loss_kd(&t, &s, temp).unwrap()).abs());

        let c = 0.5 + seed as f32 / 10.0;
        let scaled = |v: &[f32]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let base = loss_scale(&t, &s_sub, &classes).unwrap();
        let grown = loss_scale(&scaled(&t), &scaled(&s_sub), &classes).unwrap();
        worst = worst.max((grown - c * base).abs() / base.max(1.0));

        worst = worst.max(loss_kd(&t, &t, temp).unwrap().abs());
    }
    outcome(
        2,
        exact && worst <= 1e-6,
        format!("ckd(alpha=0)==soft exact: {exact}; soft(H=C)~kd, scale homogeneity, kl(p,p)=0: max dev {worst:.1e}"),
    )
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x / target - 1.0).abs() <= tol
}

fn volume_arithmetic() -> Outcome {
    const MIB: f64 = KIB * 1024.0;
    const GIB: f64 = MIB * 1024.0;
    const TIB: f64 = GIB * 1024.0;
    let experts = (0..20).map(|i| (format!("t{i}"), 54.3 * KIB));
    let pool = VolumeReport::from_sizes(177.0 * KIB, experts).unwrap();
    let cifar = exhaustive_estimate(20, 54.3 * KIB);
    let tiny = exhaustive_estimate(34, 74.9 * KIB);
    let pass = within(pool.pool_total_bytes, 1.23 * MIB, 0.005)
        && within(cifar, 54.30 * GIB, 0.005)
        && within(tiny, 1198.40 * TIB, 0.005)
        && pool.exhaustive_estimate_bytes == cifar;
    outcome(
        3,
        pass,
        format!("pool {}, 2^20 models {}, 2^34 models {:.2} TiB", pool.pool_total_binary, format_binary(cifar), tiny / TIB),
    )
}

/// An untrained pool with the desk shapes: 24 classes in 6 tasks.
fn desk_pool() -> ExpertPool {
    let arch = ArchConfig::new(10, 1.0, 1.0, 24, DESK_INPUT).unwrap();
    let split = split_library(&build_blocknet(&arch, 5).unwrap());
    let universe = TaskUniverse::uniform(24, 4).unwrap();
    let digest = weights_digest(&split);
    let experts: Vec<PoolExpert> = universe
        .primitives
        .iter()
        .enumerate()
        .map(|(i, t)| PoolExpert {
            task: t.id.clone(),
            classes: t.class_indices.clone(),
            widen_special: 0.25,
            head: split.new_head(0.25, t.len(), 50 + i as u64),
            library_digest: digest.clone(),
            config_digest: "acceptance".into(),
            bytes: None,
        })
        .collect();
    let hyper = PoolHyperparams { temperature: 4.0, alpha: 0.3, terms: CkdTerms::Both, arch, widen_special: 0.25 };
    ExpertPool::new(universe, split, experts, hyper).unwrap()
}

fn inner_conv_params(head: &Head) -> usize {
    head.conv4.blocks.iter().map(|b| b.conv2.weight.value.len()).sum()
}

fn parameter_accounting() -> Outcome {
    let pool = desk_pool();
    let ids: Vec<String> = pool.universe.primitives.iter().map(|t| t.id.clone()).collect();
    let mut exact = true;
    for n in 1..=ids.len() {
        let tm = assemble(&pool, &CompositeQuery::new(ids[..n].iter().cloned()).unwrap()).unwrap();
        let parts: usize = ids[..n].iter().map(|id| pool.experts[id].head.count_params()).sum();
        exact &= tm.params == pool.split.count_params() + parts && tm.params == tm.model.count_params();
    }
    let mut ratios = Vec::new();
    for x in [1.0, 2.0] {
        let base = pool.split.new_head(x, 4, 0);
        for n in [2.0f64, 4.0] {
            let wide = pool.split.new_head(n * x, 4, 0);
            ratios.push((n, inner_conv_params(&wide) as f64 / inner_conv_params(&base) as f64));
        }
    }
    let grows = ratios.iter().all(|&(n, r)| r >= n.powf(1.8));
    let shown: Vec<String> = ratios.iter().map(|(n, r)| format!("n={n}: {r:.2}x")).collect();
    outcome(4, exact && grows, format!("branched params additive: {exact}; inner conv growth {}", shown.join(", ")))
}

fn desk_report() -> DeskReport {
    if let Ok(path) = std::env::var("POE_DESK_REPORT") {
        let bytes = std::fs::read(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
        return serde_json::from_slice(&bytes).unwrap();
    }
    let report = run_desk(&DeskConfig::default()).unwrap();
    let saved = Path::new(env!("CARGO_TARGET_TMPDIR")).join("desk_report.json");
    std::fs::write(&saved, serde_json::to_vec_pretty(&report).unwrap()).unwrap();
    println!("desk report saved to {}", saved.display());
    report
}

fn pts(x: f32) -> f32 {
    100.0 * x
}

fn primitive_ordering(d: &DeskReport) -> Outcome {
    let order = [CKD, TRANSFER, SCRATCH, KD_GENERIC];
    let mut per_seed_ok = true;
    for s in &d.seeds {
        for w in order.windows(2) {
            let gap = pts(s.primitive_mean(w[0]).unwrap() - s.primitive_mean(w[1]).unwrap());
            per_seed_ok &= gap >= -0.5;
        }
    }
    let means: Vec<f32> = order.iter().map(|m| pts(d.mean_over_seeds(|s| s.primitive_mean(m)))).collect();
    let strict = means.windows(2).all(|w| w[0] > w[1]);
    let shown: Vec<String> = order.iter().zip(&means).map(|(m, v)| format!("{m} {v:.2}")).collect();
    Outcome {
        id: 5,
        gating: false,
        pass: per_seed_ok && strict,
        detail: format!("3-seed means {} (required in this order, strictly); per-seed gaps >= -0.5: {per_seed_ok}", shown.join(", ")),
    }
}

fn ood_confidence(d: &DeskReport) -> Outcome {
    let mut pass = true;
    let mut shown = Vec::new();
    for s in &d.seeds {
        let mode = |m: &str| s.ood[m].mode();
        let (c, sc, tr) = (mode(CKD), mode(SCRATCH), mode(TRANSFER));
        pass &= c < sc && c < tr;
        shown.push(format!("seed {}: {c}/{sc}/{tr}", s.seed));
    }
    Outcome { id: 6, gating: false, pass, detail: format!("mode bin ckd/scratch/transfer: {}", shown.join(", ")) }
}

fn consolidation_sizes(d: &DeskReport) -> &[usize] {
    &d.config.consolidation_sizes
}

fn ablation_ordering(d: &DeskReport) -> Outcome {
    let mut pass = true;
    let mut shown = Vec::new();
    for &n in consolidation_sizes(d) {
        let m = |arm: &str| pts(d.mean_over_seeds(|s| s.ablation_mean(arm, n)));
        let (b, so, sc) = (m(BOTH), m(SOFT_ONLY), m(SCALE_ONLY));
        pass &= b >= so && so >= sc;
        shown.push(format!("n={n}: both {b:.2}, soft {so:.2}, scale {sc:.2}"));
    }
    Outcome { id: 7, gating: false, pass, detail: shown.join("; ") }
}

fn joint_gap(d: &DeskReport) -> Outcome {
    let pool = desk_pool();
    let q = CompositeQuery::new(["t0", "t3", "t5"]).unwrap();
    let (_, counters) = instrument::measure(|| assemble(&pool, &q).unwrap());
    let mut pass = counters.is_zero();
    let mut shown = Vec::new();
    for &n in consolidation_sizes(d) {
        let poe = pts(d.mean_over_seeds(|s| s.ablation_mean(BOTH, n)));
        let joint = pts(d.mean_over_seeds(|s| s.joint_mean(n)));
        pass &= (joint - poe).abs() <= 5.0;
        shown.push(format!("n={n}: poe {poe:.2} vs {CKD_JOINT} {joint:.2}"));
    }
    Outcome {
        id: 8,
        gating: false,
        pass,
        detail: format!("{}; training activity during assembly: {counters:?}", shown.join("; ")),
    }
}

fn median_assembly_ms(pool: &ExpertPool, q: &CompositeQuery) -> f64 {
    let mut v: Vec<f64> = (0..25)
        .map(|_| {
            let start = Instant::now();
            let bytes = Component::TaskModel(assemble(pool, q).unwrap()).to_bytes().unwrap();
            std::hint::black_box(bytes);
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Least-squares slope of `ys` against `1..=ys.len()`.
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n + 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (num, den) = ys.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, y)| {
        let dx = i as f64 + 1.0 - xm;
        (a + dx * (y - ym), b + dx * dx)
    });
    num / den
}

fn train_free_latency(d: &DeskReport) -> Outcome {
    let pool = desk_pool();
    let ids: Vec<String> = pool.universe.primitives.iter().map(|t| t.id.clone()).collect();
    let ms: Vec<f64> = (1..=ids.len())
        .map(|n| median_assembly_ms(&pool, &CompositeQuery::new(ids[..n].iter().cloned()).unwrap()))
        .collect();
    let (lo, hi) = ms.iter().fold((f64::MAX, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    let mut pass = hi < 100.0 && hi <= 2.0 * lo;
    let mut shown = vec![format!("assemble+serialize {lo:.2}-{hi:.2} ms over n=1..={}", ids.len())];

    let timing: Vec<_> = d.seeds.iter().flat_map(|s| &s.timing).collect();
    if timing.is_empty() {
        pass = false;
        shown.push("no training-time sweep in the report".into());
    }
    for method in [SCRATCH, TRANSFER, CKD_JOINT] {
        let mut pts: Vec<_> = timing.iter().filter(|p| p.method == method).collect();
        pts.sort_by_key(|p| p.n_q);
        if pts.is_empty() {
            continue;
        }
        let secs: Vec<f64> = pts.iter().map(|p| p.seconds).collect();
        let grows = slope(&secs) > 0.0 && secs[secs.len() - 1] > secs[0];
        pass &= grows;
        shown.push(format!("{method} {:.1}s -> {:.1}s", secs[0], secs[secs.len() - 1]));
    }
    if let Some(p) = timing.iter().filter(|p| p.method == POE).map(|p| p.seconds).reduce(f64::max) {
        shown.push(format!("{POE} in-run max {:.2} ms", p * 1e3));
    }
    Outcome { id: 9, gating: false, pass, detail: shown.join("; ") }
}

fn systems_suite() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let pool = desk_pool();
    let q = CompositeQuery::new(["t4", "t1"]).unwrap();
    let bytes = Component::TaskModel(assemble(&pool, &q).unwrap()).to_bytes().unwrap();
    let again = Component::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    checks.push(("round trip", again == bytes));
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0x40;
    checks.push(("crc", Component::from_bytes(&bad).is_err()));
    let other = Component::TaskModel(assemble(&pool, &q).unwrap()).to_bytes().unwrap();
    checks.push(("model id", sha256_hex(&other) == sha256_hex(&bytes)));
    checks.push(("stress", concurrent_stress()));
    checks.push(("cli", cli_pipeline()));
    let pass = checks.iter().all(|c| c.1);
    let shown: Vec<String> = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "failed" })).collect();
    outcome(10, pass, shown.join(", "))
}

fn concurrent_stress() -> bool {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(8).enable_all().build().unwrap();
    rt.block_on(async {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = desk_pool();
        let manifest = save_pool(&mut pool, dir.path(), None, None, 0).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(serve_on(listener, manifest, 64));
        let client = reqwest::Client::new();
        for _ in 0..500 {
            if client.get(format!("{base}/v1/pool")).send().await.is_ok_and(|r| r.status() == 200) {
                break;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }

        let queries: Vec<Vec<&str>> = vec![vec!["t0"], vec!["t2", "t1"], vec!["t5", "t0", "t3"], vec!["t0", "t1", "t2", "t3", "t4", "t5"]];
        let mut expected = BTreeMap::new();
        for q in &queries {
            let tm = assemble(&pool, &CompositeQuery::new(q.iter().copied()).unwrap()).unwrap();
            expected.insert(q.join(","), sha256_hex(&Component::TaskModel(tm).to_bytes().unwrap()));
        }
        let expected = Arc::new(expected);
        let image: Vec<f32> = (0..DESK_INPUT.numel()).map(|i| (i % 13) as f32 / 13.0 - 0.5).collect();

        let mut handles = Vec::new();
        for c in 0..16usize {
            let (client, base, queries, expected, image) =
                (client.clone(), base.clone(), queries.clone(), expected.clone(), image.clone());
            handles.push(tokio::spawn(async move {
                let mut seen = Vec::new();
                for round in 0..8 {
                    let q = &queries[(c + round) % queries.len()];
                    let r: QueryResponse =
                        client.post(format!("{base}/v1/query")).json(&json!({ "tasks": q })).send().await.ok()?.json().await.ok()?;
                    if r.model_id != expected[&q.join(",")] {
                        return None;
                    }
                    let p: PredictResponse = client
                        .post(format!("{base}/v1/predict"))
                        .json(&json!({ "model_id": r.model_id, "input": image, "shape": [3, 8, 8] }))
                        .send()
                        .await
                        .ok()?
                        .json()
                        .await
                        .ok()?;
                    seen.push((q.join(","), p.probs));
                }
                Some(seen)
            }));
        }
        let mut by_query: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for h in handles {
            let Some(seen) = h.await.unwrap() else { return false };
            for (q, probs) in seen {
                if by_query.entry(q).or_insert_with(|| probs.clone()) != &probs {
                    return false;
                }
            }
        }
        by_query.len() == queries.len()
    })
}

fn poe(args: &[&str]) -> Option<Value> {
    let out = Command::new(env!("CARGO_BIN_EXE_poe")).args(args).env("POE_LOG", "error").output().ok()?;
    if !out.status.success() {
        eprintln!("poe {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        return None;
    }
    serde_json::from_slice(&out.stdout).ok()
}

fn cli_pipeline() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_owned();
    let s = |path: &Path| path.to_str().unwrap().to_owned();
    let train = ["--epochs", "2", "--batch-size", "16"];
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-synth", "--seed", "3", "--out", &s(d), "--classes", "6", "--classes-per-task", "2", "--train-per-class", "8", "--eval-per-class", "4", "--image-size", "4"]
            .into_iter().map(String::from).collect(),
        [&["train-oracle", "--data", &p("data.json"), "--out", &p("oracle.poem"), "--depth", "10", "--widen", "0.5"][..], &train].concat().into_iter().map(String::from).collect(),
        [&["distill-library", "--data", &p("data.json"), "--oracle", &p("oracle.poem"), "--out", &p("library.poem"), "--widen", "0.25"][..], &train].concat().into_iter().map(String::from).collect(),
        [&["extract-experts", "--data", &p("data.json"), "--oracle", &p("oracle.poem"), "--library", &p("library.poem"), "--out-dir", &p("experts")][..], &train].concat().into_iter().map(String::from).collect(),
        ["build-pool", "--library", &p("library.poem"), "--experts", &p("experts"), "--out", &p("pool")].into_iter().map(String::from).collect(),
        ["query", "--pool", &format!("{}/pool.json", p("pool")), "--tasks", "t1,t0", "--out", &p("m.poem")].into_iter().map(String::from).collect(),
        ["eval", "--model", &p("m.poem"), "--data", &p("data.json")].into_iter().map(String::from).collect(),
    ];
    steps.iter().all(|args| {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        poe(&args).is_some_and(|r| r["status"] == "ok")
    })
}

fn branch_consistency() -> Outcome {
    let pool = desk_pool();
    let ids: Vec<String> = pool.universe.primitives.iter().map(|t| t.id.clone()).collect();
    let x: Tensor = uniform(&mut case_rng(77), &[100, 3, 8, 8], -2.0, 2.0);
    let features = pool.split.features(&x, 100, Exec::Sequential).unwrap();
    let alone: BTreeMap<&str, Tensor> =
        ids.iter().map(|id| (id.as_str(), pool.experts[id].head.logits(&features).unwrap())).collect();

    let mut models = 0;
    let mut pass = true;
    for mask in 1u32..(1 << ids.len()) {
        let subset: Vec<&String> = ids.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, id)| id).collect();
        for order in [subset.clone(), subset.iter().rev().copied().collect()] {
            let tm = assemble(&pool, &CompositeQuery::new(order.iter().map(|s| s.as_str())).unwrap()).unwrap();
            let unified = tm.model.predict(&x, 100, Exec::Sequential).unwrap();
            for (range, id) in tm.model.blocks().into_iter().zip(&order) {
                let a = &alone[id.as_str()];
                for r in 0..100 {
                    let block = &unified.row(r)[range.clone()];
                    pass &= block == a.row(r) && argmax(block) == argmax(a.row(r));
                }
            }
            models += 1;
        }
    }
    outcome(11, pass, format!("{models} assembled models x 100 inputs, blocks bit-exact with standalone experts"))
}
