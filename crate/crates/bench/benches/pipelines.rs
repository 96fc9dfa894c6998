use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pairsync::{run_scenario, RunOptions, SimDuration};
use pairsync_bench::small_offset_scenario;

fn pipelines(c: &mut Criterion) {
    let cfg = small_offset_scenario(SimDuration::from_ps(100_000_000_000));
    let mut g = c.benchmark_group("pipelines");
    g.sample_size(20);
    g.bench_function("cw_offset_qkd_100ms", |bench| bench.iter(|| run_scenario(black_box(&cfg), RunOptions::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, pipelines);
criterion_main!(benches);
