use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use dltmle_bench::{survival_batch, trained};
use dltmle_core::ltmle::{ltmle_glm, GlmSpec};
use dltmle_core::targeting::estimate;
use dltmle_core::training::train;
use dltmle_core::{Method, ModelConfig, PolicySpec, Trajectory, Truncation};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn model(c: &mut Criterion) {
    let batch = survival_batch(256, 10);
    let (model, _) = trained(&batch, 0);
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    c.bench_function("predict 256x10", |b| {
        b.iter(|| model.predict(black_box(&trajs), None, false).unwrap())
    });

    let small = survival_batch(200, 10);
    let mut cfg = ModelConfig::preset("simple-tau10").unwrap();
    cfg.epochs = 1;
    let g = PolicySpec::always_treat();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("one epoch 200x10", |b| {
        b.iter(|| train(black_box(&small), &g, &cfg).unwrap())
    });
    group.finish();
}

fn targeting(c: &mut Criterion) {
    let batch = survival_batch(1000, 10);
    let (_, outputs) = trained(&batch, 0);
    for (name, method) in [("td", Method::Td), ("seq", Method::Seq)] {
        c.bench_function(&format!("{name} targeting 1000x10"), |b| {
            b.iter(|| estimate(&batch, black_box(&outputs), method, Truncation::None).unwrap())
        });
    }
    let g = PolicySpec::always_treat();
    c.bench_function("ltmle-glm 1000x10", |b| {
        b.iter_batched(
            || batch.clone(),
            |data| ltmle_glm(&data, &g, &GlmSpec::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, model, targeting);
criterion_main!(benches);
