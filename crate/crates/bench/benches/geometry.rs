use chartflow::geo_multi::{
    exp_map_multi, log_map_multi, project_to_manifold, ExpScheme, MultiExpConfig,
};
use chartflow::geo_single::{CurveOptimizer, LogMapConfig};
use chartflow_bench::{sphere_atlas, sphere_points};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn geometry_benches(c: &mut Criterion) {
    let atlas = sphere_atlas();
    let pts = sphere_points(16);
    let (x0, x1) = (pts.row(2).to_vec(), pts.row(9).to_vec());

    c.bench_function("atlas/responsibilities", |b| {
        b.iter(|| atlas.responsibility_row(black_box(&x0)).unwrap())
    });
    c.bench_function("atlas/project", |b| {
        b.iter(|| project_to_manifold(&atlas, black_box(&x0)).unwrap())
    });

    let mut group = c.benchmark_group("expmap");
    group.sample_size(10);
    let v0 = [0.0, 0.3, -0.2];
    let cfg = MultiExpConfig::default();
    for scheme in [ExpScheme::Euler, ExpScheme::HardSwitch, ExpScheme::Ambient] {
        group.bench_function(scheme.to_string(), |b| {
            b.iter(|| exp_map_multi(&atlas, scheme, &x0, &v0, &cfg).ok())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("logmap");
    group.sample_size(10);
    let gn = LogMapConfig {
        optimizer: CurveOptimizer::GaussNewton,
        iterations: 100,
        ..LogMapConfig::default()
    };
    group.bench_function("gauss_newton", |b| {
        b.iter(|| log_map_multi(&atlas, &x0, &x1, &gn).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry_benches);
criterion_main!(benches);
