//! Evaluation throughput: rayon fan-out across images vs the sequential
//! path. Both produce byte-identical reports; this measures the speedup.
//!
//! Run with `cargo bench -p opensd`. Building without the `parallel`
//! feature makes the "parallel" case fall back to sequential, which is a
//! handy sanity check that the two paths really do the same work.

use criterion::{criterion_group, criterion_main, Criterion};
use opensd::harness::{
    evaluate, evaluate_sequential, synthesize_dataset, EvalOptions, Pipeline, RunConfig,
};
use opensd::tensor::ParamStore;

fn bench_eval(c: &mut Criterion) {
    let cfg = RunConfig {
        scene_size: 32,
        decoder_layers: 2,
        thing_queries: 6,
        stuff_queries: 3,
        eval_scenes: 8,
        ..RunConfig::default()
    };
    let dataset = synthesize_dataset(&cfg).expect("dataset");
    let mut store = ParamStore::new();
    Pipeline::init(&mut store, &cfg, &dataset.vocab);
    let opts = EvalOptions::from_config(&cfg).expect("options");

    let mut group = c.benchmark_group("evaluate_8_scenes");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| evaluate(&store, &cfg, &dataset.vocab, &dataset.eval, &opts).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| evaluate_sequential(&store, &cfg, &dataset.vocab, &dataset.eval, &opts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_eval);
criterion_main!(benches);
