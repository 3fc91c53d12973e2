//! Discrete-event simulation throughput, pipelined vs serial baseline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use moeflow_bench::bench_compiled;
use moeflow_core::compile::MoeGraphKind;
use moeflow_core::sim::{simulate, CostModel, DispatchMode, SimMode};

fn bench_simulate(c: &mut Criterion) {
    let cm = CostModel::default();
    let mut group = c.benchmark_group("simulate");
    for ep in [2usize, 4, 8] {
        let (compiled, _) = bench_compiled(ep, MoeGraphKind::Forward);
        let sscs = compiled.sscs();
        group.bench_with_input(BenchmarkId::new("pipelined", ep), &ep, |b, _| {
            b.iter(|| simulate(&sscs, &cm, SimMode::Pipelined, DispatchMode::Static).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("serial", ep), &ep, |b, _| {
            b.iter(|| simulate(&sscs, &cm, SimMode::SerialBaseline, DispatchMode::Static).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulate);
criterion_main!(benches);
