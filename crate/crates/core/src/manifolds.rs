//! Synthetic manifolds: samplers, evaluation point sets and closed-form
//! geometric oracles for the circle, sphere and torus.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{dot, norm, Points};

/// Tolerance for "is this point on the manifold" checks, relative to the
/// manifold's size.
const ON_MANIFOLD_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldSpec {
    Circle {
        radius: f64,
    },
    Sphere {
        radius: f64,
    },
    /// `((R + r cos θ) cos φ, (R + r cos θ) sin φ, r sin θ)`.
    Torus {
        major: f64,
        minor: f64,
    },
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        ManifoldSpec::Sphere { radius: 1.0 }
    }
}

impl ManifoldSpec {
    pub fn torus() -> Self {
        ManifoldSpec::Torus {
            major: 2.0,
            minor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ManifoldSpec::Circle { radius } | ManifoldSpec::Sphere { radius } => radius > 0.0,
            ManifoldSpec::Torus { major, minor } => minor > 0.0 && major > minor,
        };
        if !ok {
            return Err(Error::Config(format!(
                "invalid manifold {self:?}: radii must be positive (torus needs major > minor)"
            )));
        }
        Ok(())
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            ManifoldSpec::Circle { .. } => 2,
            _ => 3,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ManifoldSpec::Circle { .. } => 1,
            _ => 2,
        }
    }

    fn scale(&self) -> f64 {
        match *self {
            ManifoldSpec::Circle { radius } | ManifoldSpec::Sphere { radius } => radius,
            ManifoldSpec::Torus { major, minor } => major + minor,
        }
    }

    /// Distance from `x` to the manifold.
    pub fn residual(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.ambient_dim() {
            return Err(Error::Dimension {
                op: "manifold residual",
                expected: self.ambient_dim(),
                got: x.len(),
            });
        }
        Ok(match *self {
            ManifoldSpec::Circle { radius } | ManifoldSpec::Sphere { radius } => {
                (norm(x) - radius).abs()
            }
            ManifoldSpec::Torus { major, minor } => {
                let rho = x[0].hypot(x[1]) - major;
                (rho.hypot(x[2]) - minor).abs()
            }
        })
    }

    fn check_on(&self, x: &[f64]) -> Result<()> {
        let residual = self.residual(x)?;
        let tol = ON_MANIFOLD_RTOL * self.scale();
        if !(residual <= tol) {
            return Err(Error::OffManifold { residual, tol });
        }
        Ok(())
    }

    /// Torus point from angles `(φ, θ)`.
    pub fn torus_point(&self, phi: f64, theta: f64) -> Result<Vec<f64>> {
        match *self {
            ManifoldSpec::Torus { major, minor } => {
                let w = major + minor * theta.cos();
                Ok(vec![w * phi.cos(), w * phi.sin(), minor * theta.sin()])
            }
            _ => Err(Error::Unsupported("angular torus coordinates")),
        }
    }

    /// Angles `(φ, θ)` of a torus point.
    pub fn torus_angles(&self, x: &[f64]) -> Result<(f64, f64)> {
        match *self {
            ManifoldSpec::Torus { major, .. } => {
                let phi = x[1].atan2(x[0]);
                let theta = x[2].atan2(x[0].hypot(x[1]) - major);
                Ok((phi, theta))
            }
            _ => Err(Error::Unsupported("angular torus coordinates")),
        }
    }
}

/// Distribution on a manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    /// Uniform on the circle and sphere; uniform in both angles on the
    /// torus.
    Uniform,
    /// Equal-weight von Mises–Fisher mixture on the sphere.
    VmfMixture { means: Vec<[f64; 3]>, kappa: f64 },
    /// Equal-weight bivariate von Mises mixture in torus angles `(φ, θ)`.
    BvmMixture {
        means: Vec<[f64; 2]>,
        concentration: f64,
        correlation: f64,
    },
}

impl Default for DistributionSpec {
    fn default() -> Self {
        DistributionSpec::Uniform
    }
}

impl DistributionSpec {
    /// Four tetrahedral means, `κ = 5`.
    pub fn vmf_tetrahedral() -> Self {
        let s = 1.0 / 3f64.sqrt();
        DistributionSpec::VmfMixture {
            means: vec![[s, s, s], [-s, -s, s], [-s, s, -s], [s, -s, -s]],
            kappa: 5.0,
        }
    }

    /// Means `(0,0), (π,0), (0,π), (π,π)`, concentration 1, no correlation.
    pub fn bvm_four() -> Self {
        DistributionSpec::BvmMixture {
            means: vec![[0.0, 0.0], [PI, 0.0], [0.0, PI], [PI, PI]],
            concentration: 1.0,
            correlation: 0.0,
        }
    }

    pub fn validate(&self, m: &ManifoldSpec) -> Result<()> {
        match (self, m) {
            (DistributionSpec::Uniform, _) => Ok(()),
            (DistributionSpec::VmfMixture { means, kappa }, ManifoldSpec::Sphere { .. }) => {
                if means.is_empty() || !(*kappa > 0.0) {
                    return Err(Error::Config(
                        "vmf mixture needs at least one mean and kappa > 0".into(),
                    ));
                }
                if means.iter().any(|mu| (norm(mu) - 1.0).abs() > 1e-9) {
                    return Err(Error::Config("vmf means must be unit vectors".into()));
                }
                Ok(())
            }
            (
                DistributionSpec::BvmMixture {
                    means,
                    concentration,
                    correlation,
                },
                ManifoldSpec::Torus { .. },
            ) => {
                if means.is_empty() || !(*concentration > 0.0) {
                    return Err(Error::Config(
                        "bvm mixture needs at least one mean and concentration > 0".into(),
                    ));
                }
                if *correlation != 0.0 {
                    return Err(Error::Config(
                        "only uncorrelated bivariate von Mises components are supported".into(),
                    ));
                }
                Ok(())
            }
            (d, m) => Err(Error::Config(format!(
                "distribution {d:?} is not defined on {m:?}"
            ))),
        }
    }
}

/// Best–Fisher rejection sampler for the von Mises distribution.
pub fn sample_von_mises<R: Rng>(mu: f64, kappa: f64, rng: &mut R) -> f64 {
    if kappa < 1e-8 {
        return mu + PI * (2.0 * rng.random::<f64>() - 1.0);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = mu + (u3 - 0.5).signum() * f.clamp(-1.0, 1.0).acos();
            return wrap_angle(theta);
        }
    }
}

/// Angle in `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - TAU * ((a + PI) / TAU).floor();
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Wood's rejection sampler for the von Mises–Fisher distribution on S².
pub fn sample_vmf<R: Rng>(mu: &[f64; 3], kappa: f64, rng: &mut R) -> [f64; 3] {
    let p = 3.0;
    let b = (-2.0 * kappa + (4.0 * kappa * kappa + (p - 1.0) * (p - 1.0)).sqrt()) / (p - 1.0);
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + (p - 1.0) * (1.0 - x0 * x0).ln();
    let beta = Beta::new((p - 1.0) / 2.0, (p - 1.0) / 2.0).expect("valid beta parameters");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + (p - 1.0) * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    // uniform direction orthogonal to mu
    let v = loop {
        let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let d = dot(&g, mu);
        let t = [g[0] - d * mu[0], g[1] - d * mu[1], g[2] - d * mu[2]];
        let n = norm(&t);
        if n > 1e-12 {
            break [t[0] / n, t[1] / n, t[2] / n];
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    std::array::from_fn(|i| w * mu[i] + s * v[i])
}

/// `n` i.i.d. samples from `dist` on `m`, deterministic in `seed`.
pub fn sample_dataset(
    m: &ManifoldSpec,
    dist: &DistributionSpec,
    n: usize,
    seed: u64,
) -> Result<Points> {
    m.validate()?;
    dist.validate(m)?;
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Points::with_capacity(m.ambient_dim(), n);
    for _ in 0..n {
        let x: Vec<f64> = match (m, dist) {
            (ManifoldSpec::Circle { radius }, DistributionSpec::Uniform) => {
                let a = TAU * rng.random::<f64>();
                vec![radius * a.cos(), radius * a.sin()]
            }
            (ManifoldSpec::Sphere { radius }, DistributionSpec::Uniform) => loop {
                let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let n = norm(&g);
                if n > 1e-12 {
                    break g.iter().map(|v| radius * v / n).collect();
                }
            },
            (ManifoldSpec::Sphere { radius }, DistributionSpec::VmfMixture { means, kappa }) => {
                let k = rng.random_range(0..means.len());
                sample_vmf(&means[k], *kappa, &mut rng)
                    .iter()
                    .map(|v| radius * v)
                    .collect()
            }
            (ManifoldSpec::Torus { .. }, DistributionSpec::Uniform) => {
                let (a, b) = (TAU * rng.random::<f64>(), TAU * rng.random::<f64>());
                m.torus_point(a, b)?
            }
            (
                ManifoldSpec::Torus { .. },
                DistributionSpec::BvmMixture {
                    means,
                    concentration,
                    ..
                },
            ) => {
                let k = rng.random_range(0..means.len());
                let a = sample_von_mises(means[k][0], *concentration, &mut rng);
                let b = sample_von_mises(means[k][1], *concentration, &mut rng);
                m.torus_point(a, b)?
            }
            _ => unreachable!("rejected by validate"),
        };
        out.push(&x)?;
    }
    Ok(out)
}

/// Train, validation and test parts of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Points,
    pub val: Points,
    pub test: Points,
}

/// Validation and test sizes of one twelfth each (1000/1000 of 12000),
/// at least one point each.
pub fn default_split_sizes(n: usize) -> (usize, usize) {
    let k = (n / 12).max(1);
    (k, k)
}

/// Shuffles with `seed`, then cuts off `n_val` validation and `n_test` test
/// points; the rest is training data.
pub fn split_dataset(data: &Points, n_val: usize, n_test: usize, seed: u64) -> Result<DataSplit> {
    use rand::seq::SliceRandom;
    if n_val == 0 || n_test == 0 || n_val + n_test >= data.len() {
        return Err(Error::Config(format!(
            "cannot split {} points into {n_val} validation and {n_test} test points with training data left",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = data.len() - n_val - n_test;
    Ok(DataSplit {
        train: data.select(&idx[..n_train]),
        val: data.select(&idx[n_train..n_train + n_val]),
        test: data.select(&idx[n_train + n_val..]),
    })
}

/// `n` near-uniform points on the unit sphere on a golden-angle spiral.
pub fn fibonacci_lattice(n: usize) -> Points {
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut out = Points::with_capacity(3, n);
    for i in 0..n {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden * i as f64;
        out.push(&[r * phi.cos(), r * phi.sin(), z])
            .expect("dimension 3");
    }
    out
}

/// `k × k` product grid of torus angles.
pub fn torus_grid_points(m: &ManifoldSpec, k: usize) -> Result<Points> {
    let mut out = Points::with_capacity(3, k * k);
    for i in 0..k {
        for j in 0..k {
            let (a, b) = (TAU * i as f64 / k as f64, TAU * j as f64 / k as f64);
            out.push(&m.torus_point(a, b)?)?;
        }
    }
    Ok(out)
}

/// `n` near-uniform torus points on rings of constant θ. Ring `k` sits at
/// `θ = 2πk/rings` and gets a share of the points proportional to its
/// circumference `R + r cos θ` (largest remainder rounding); odd rings are
/// rotated by half a step. `rings` defaults to `round(√(n/2))`.
pub fn torus_ring_lattice(m: &ManifoldSpec, n: usize, rings: Option<usize>) -> Result<Points> {
    let ManifoldSpec::Torus { major, minor } = *m else {
        return Err(Error::Unsupported("torus ring lattice"));
    };
    let rings = rings.unwrap_or(((n as f64 / 2.0).sqrt().round() as usize).max(1));
    if rings == 0 || n < rings {
        return Err(Error::Config(format!(
            "cannot place {n} points on {rings} rings"
        )));
    }
    let theta: Vec<f64> = (0..rings).map(|k| TAU * k as f64 / rings as f64).collect();
    let w: Vec<f64> = theta.iter().map(|t| major + minor * t.cos()).collect();
    let total: f64 = w.iter().sum();
    let quota: Vec<f64> = w.iter().map(|x| n as f64 * x / total).collect();
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..rings).collect();
    order.sort_by(|&a, &b| {
        (quota[b] - quota[b].floor())
            .total_cmp(&(quota[a] - quota[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(missing) {
        counts[k] += 1;
    }
    let mut out = Points::with_capacity(3, n);
    for (k, &c) in counts.iter().enumerate() {
        let stagger = 0.5 * (k % 2) as f64;
        for i in 0..c {
            let phi = TAU * (i as f64 + stagger) / c as f64;
            out.push(&m.torus_point(phi, theta[k])?)?;
        }
    }
    Ok(out)
}

/// `n` equally spaced circle points starting at angle 0.
pub fn circle_points(radius: f64, n: usize) -> Points {
    let mut out = Points::with_capacity(2, n);
    for i in 0..n {
        let a = TAU * i as f64 / n as f64;
        out.push(&[radius * a.cos(), radius * a.sin()])
            .expect("dimension 2");
    }
    out
}

/// Evaluation points: Fibonacci lattice (sphere), ring lattice (torus) or
/// equally spaced (circle).
pub fn evaluation_points(m: &ManifoldSpec, n: usize) -> Result<Points> {
    Ok(match *m {
        ManifoldSpec::Circle { radius } => circle_points(radius, n),
        ManifoldSpec::Sphere { radius } => {
            let p = fibonacci_lattice(n);
            Points::from_flat(3, p.as_flat().iter().map(|v| radius * v).collect())?
        }
        ManifoldSpec::Torus { .. } => torus_ring_lattice(m, n, None)?,
    })
}

/// Riemannian logarithm from an oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLog {
    pub v: Vec<f64>,
    /// False for antipodal pairs, where the principal value is one of many.
    pub unique: bool,
}

fn round_radius(m: &ManifoldSpec) -> Result<f64> {
    match *m {
        ManifoldSpec::Circle { radius } | ManifoldSpec::Sphere { radius } => Ok(radius),
        ManifoldSpec::Torus { .. } => Err(Error::Unsupported("closed-form torus geodesics")),
    }
}

/// Closed-form exponential map (circle and sphere).
pub fn true_exp(m: &ManifoldSpec, x0: &[f64], v0: &[f64]) -> Result<Vec<f64>> {
    let r = round_radius(m)?;
    m.check_on(x0)?;
    let s = norm(v0);
    if s == 0.0 {
        return Ok(x0.to_vec());
    }
    let a = s / r;
    Ok(x0
        .iter()
        .zip(v0)
        .map(|(x, v)| a.cos() * x + r * a.sin() * v / s)
        .collect())
}

/// Closed-form logarithm (circle and sphere). Antipodal pairs get a
/// deterministic principal direction and `unique == false`.
pub fn true_log(m: &ManifoldSpec, x0: &[f64], x1: &[f64]) -> Result<OracleLog> {
    let r = round_radius(m)?;
    m.check_on(x0)?;
    m.check_on(x1)?;
    let c = (dot(x0, x1) / (r * r)).clamp(-1.0, 1.0);
    let theta = c.acos();
    let mut u: Vec<f64> = x1.iter().zip(x0).map(|(b, a)| b - c * a).collect();
    let mut nu = norm(&u);
    let mut unique = true;
    if nu < 1e-12 * r {
        if c > 0.0 {
            return Ok(OracleLog {
                v: vec![0.0; x0.len()],
                unique: true,
            });
        }
        unique = false;
        // any tangent direction; take the coordinate axis least aligned
        // with x₀
        let k = (0..x0.len())
            .min_by(|&i, &j| x0[i].abs().total_cmp(&x0[j].abs()))
            .unwrap_or(0);
        let mut e = vec![0.0; x0.len()];
        e[k] = 1.0;
        let d = dot(&e, x0) / (r * r);
        u = e.iter().zip(x0).map(|(a, b)| a - d * b).collect();
        nu = norm(&u);
    }
    Ok(OracleLog {
        v: u.iter().map(|a| r * theta * a / nu).collect(),
        unique,
    })
}

/// Geodesic distance: closed form on the circle and sphere; on the torus a
/// grid graph oracle at the default resolution (512²).
pub fn true_distance(m: &ManifoldSpec, x0: &[f64], x1: &[f64]) -> Result<f64> {
    match m {
        ManifoldSpec::Torus { .. } => {
            let g = TorusGrid::new(*m, 512)?;
            g.distance(x0, x1)
        }
        _ => {
            let r = round_radius(m)?;
            m.check_on(x0)?;
            m.check_on(x1)?;
            Ok(r * (dot(x0, x1) / (r * r)).clamp(-1.0, 1.0).acos())
        }
    }
}

/// Pairwise oracle distances between `points` (dense, symmetric).
pub fn true_distance_matrix(m: &ManifoldSpec, points: &Points) -> Result<Vec<f64>> {
    let n = points.len();
    let mut out = vec![0.0; n * n];
    match m {
        ManifoldSpec::Torus { .. } => {
            let g = TorusGrid::new(*m, 512)?;
            let rows = g.distance_rows(points)?;
            for i in 0..n {
                for j in 0..i {
                    let d = 0.5 * (rows[i][j] + rows[j][i]);
                    out[i * n + j] = d;
                    out[j * n + i] = d;
                }
            }
        }
        _ => {
            for i in 0..n {
                for j in 0..i {
                    let d = true_distance(m, points.row(i), points.row(j))?;
                    out[i * n + j] = d;
                    out[j * n + i] = d;
                }
            }
        }
    }
    Ok(out)
}

/// Graph approximation of torus geodesic distance: a periodic `k × k` grid
/// of angles, each node linked to every node reachable by a primitive
/// offset `(di, dj)` with `|di|, |dj| ≤ 3`, weighted by the Euclidean
/// distance between the embedded nodes.
#[derive(Debug, Clone)]
pub struct TorusGrid {
    spec: ManifoldSpec,
    k: usize,
    nodes: Vec<[f64; 3]>,
    offsets: Vec<(i64, i64)>,
}

const STENCIL_RADIUS: i64 = 3;

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties by node index
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl TorusGrid {
    pub fn new(spec: ManifoldSpec, k: usize) -> Result<Self> {
        spec.validate()?;
        if !matches!(spec, ManifoldSpec::Torus { .. }) {
            return Err(Error::Unsupported("torus grid oracle"));
        }
        if k < 8 {
            return Err(Error::Config(
                "torus grid needs at least 8 nodes per angle".into(),
            ));
        }
        let mut nodes = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                let p = spec.torus_point(TAU * i as f64 / k as f64, TAU * j as f64 / k as f64)?;
                nodes.push([p[0], p[1], p[2]]);
            }
        }
        let mut offsets = Vec::new();
        for di in -STENCIL_RADIUS..=STENCIL_RADIUS {
            for dj in -STENCIL_RADIUS..=STENCIL_RADIUS {
                if (di, dj) != (0, 0) && gcd(di, dj) == 1 {
                    offsets.push((di, dj));
                }
            }
        }
        Ok(TorusGrid {
            spec,
            k,
            nodes,
            offsets,
        })
    }

    /// Grid node nearest to a torus point.
    pub fn node_of(&self, x: &[f64]) -> Result<usize> {
        self.spec.check_on(x)?;
        let (a, b) = self.spec.torus_angles(x)?;
        let k = self.k as f64;
        let i = ((a.rem_euclid(TAU) / TAU * k).round() as usize) % self.k;
        let j = ((b.rem_euclid(TAU) / TAU * k).round() as usize) % self.k;
        Ok(i * self.k + j)
    }

    /// Single-source shortest paths over the grid graph.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let k = self.k as i64;
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Entry(0.0, source));
        while let Some(Entry(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            let (ui, uj) = ((u / self.k) as i64, (u % self.k) as i64);
            let pu = self.nodes[u];
            for &(di, dj) in &self.offsets {
                let v = ((ui + di).rem_euclid(k) * k + (uj + dj).rem_euclid(k)) as usize;
                let pv = self.nodes[v];
                let w =
                    ((pu[0] - pv[0]).powi(2) + (pu[1] - pv[1]).powi(2) + (pu[2] - pv[2]).powi(2))
                        .sqrt();
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Entry(nd, v));
                }
            }
        }
        dist
    }

    pub fn distance(&self, x0: &[f64], x1: &[f64]) -> Result<f64> {
        let (a, b) = (self.node_of(x0)?, self.node_of(x1)?);
        Ok(self.distances_from(a)[b])
    }

    /// Row `i` holds the distances from point `i` to every point.
    pub fn distance_rows(&self, points: &Points) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        let nodes: Vec<usize> = points
            .rows()
            .map(|x| self.node_of(x))
            .collect::<Result<_>>()?;
        Ok(nodes
            .par_iter()
            .map(|&s| {
                let d = self.distances_from(s);
                nodes.iter().map(|&t| d[t]).collect()
            })
            .collect())
    }
}
