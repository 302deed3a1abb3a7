use chartflow::flows::ChartFlow;
use chartflow_bench::{sphere_flow_config, sphere_points};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn flow_benches(c: &mut Criterion) {
    let mut flow = ChartFlow::new(sphere_flow_config(), 0).unwrap();
    flow.randomize(0.05, 1);
    let pts = sphere_points(64);
    let x = pts.row(3).to_vec();

    c.bench_function("flow/log_density", |b| {
        b.iter(|| flow.log_density(black_box(&x)).unwrap())
    });
    c.bench_function("flow/reconstruct", |b| {
        b.iter(|| flow.reconstruct(black_box(&x)).unwrap())
    });
    let z = flow.h_dagger(&x).unwrap();
    c.bench_function("flow/embedding_jacobian", |b| {
        b.iter(|| flow.embedding_jacobian(black_box(&z)).unwrap())
    });
    c.bench_function("flow/sample_256", |b| {
        b.iter_batched(
            || 7u64,
            |seed| flow.sample(256, seed).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, flow_benches);
criterion_main!(benches);
