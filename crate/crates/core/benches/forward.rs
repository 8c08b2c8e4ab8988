//! Sequential against data-parallel execution of the batched paths, plus the
//! cost of assembling and serializing a task model.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use poe_core::consolidate::{assemble, CompositeQuery, ExpertPool, PoolExpert, PoolHyperparams};
use poe_core::distill::CkdTerms;
use poe_core::netzoo::{build_blocknet, split_library, weights_digest, ArchConfig, InputShape};
use poe_core::par::Exec;
use poe_core::store::Component;
use poe_core::task::TaskUniverse;
use poe_core::tensor::Tensor;

fn inputs(n: usize, shape: InputShape) -> Tensor {
    let data = (0..n * shape.numel()).map(|i| ((i * 7919) % 256) as f32 / 128.0 - 1.0).collect();
    Tensor::new(vec![n, shape.channels, shape.height, shape.width], data).unwrap()
}

fn batched_inference(c: &mut Criterion) {
    let shape = InputShape::new(3, 16, 16);
    let net = build_blocknet(&ArchConfig::new(10, 1.0, 1.0, 24, shape).unwrap(), 0).unwrap();
    let x = inputs(256, shape);
    let mut g = c.benchmark_group("predict_256x16x16");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| net.predict(&x, 32, exec).unwrap())
        });
    }
    g.finish();
}

fn assembly(c: &mut Criterion) {
    let shape = InputShape::new(3, 8, 8);
    let arch = ArchConfig::new(10, 1.0, 1.0, 24, shape).unwrap();
    let split = split_library(&build_blocknet(&arch, 0).unwrap());
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
            head: split.new_head(0.25, t.len(), i as u64),
            library_digest: digest.clone(),
            config_digest: String::new(),
            bytes: None,
        })
        .collect();
    let hyper = PoolHyperparams { temperature: 4.0, alpha: 0.3, terms: CkdTerms::Both, arch, widen_special: 0.25 };
    let pool = ExpertPool::new(universe, split, experts, hyper).unwrap();
    let mut g = c.benchmark_group("assemble_and_serialize");
    for n in [1, 3, 6] {
        let q = CompositeQuery::new((0..n).map(|i| format!("t{i}"))).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &q, |b, q| {
            b.iter(|| Component::TaskModel(assemble(&pool, q).unwrap()).to_bytes().unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batched_inference, assembly);
criterion_main!(benches);
