//! Fixtures shared by the benchmarks.

use chartflow::atlas::Atlas;
use chartflow::flows::FlowConfig;
use chartflow::manifolds::fibonacci_lattice;
use chartflow::Points;

/// Sphere-sized flow with the layer counts used for sphere experiments.
pub fn sphere_flow_config() -> FlowConfig {
    FlowConfig {
        latent_dim: 2,
        ambient_dim: 3,
        g_layers: 3,
        h_layers: 9,
        hidden: 16,
        s_max: 2.0,
    }
}

/// Four-chart sphere atlas with small random weights.
pub fn sphere_atlas() -> Atlas {
    let mut atlas = Atlas::new(sphere_flow_config(), 4, 0).expect("valid config");
    for (i, c) in atlas.charts.iter_mut().enumerate() {
        c.randomize(0.05, i as u64);
    }
    atlas
}

pub fn sphere_points(n: usize) -> Points {
    fibonacci_lattice(n)
}

/// Random symmetric distance matrix of `n` points in the plane.
pub fn planar_distances(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (next(), next())).collect();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
        }
    }
    d
}
