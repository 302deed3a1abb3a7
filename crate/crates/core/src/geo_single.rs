//! Riemannian geometry of a single chart.
//!
//! A chart is an embedding `h̃: R^d → R^D` together with a left inverse. The
//! embedding induces the pullback metric `G = JᵀJ` on latent space, whose
//! geodesics satisfy
//!
//! ```text
//! z̈ = −G⁻¹ Jᵀ q,    q_m = Σ_ij ∂²h̃_m/∂z_i∂z_j ż_i ż_j
//! ```
//!
//! and whose ambient acceleration is `q + J z̈`, the normal component of `q`.
//! `q` comes from one second-order forward pass, so no Hessian or
//! Christoffel symbol is ever formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Scalar, SmoothFn};
use crate::error::{Error, Result};
use crate::flows::{engine, ChartFlow};
use crate::ode::{self, Integrator, PartialSolution};
use crate::points::{dist2, norm, Points};
pub use crate::spline::{curve_energy, curve_length, SplineBasis, SplineCurve};

/// A smooth embedding of latent space into ambient space with a left
/// inverse.
pub trait Chart: Sync {
    fn latent_dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;
    /// `x = h̃(z)`.
    fn embed<S: Scalar>(&self, z: &[S]) -> Vec<S>;
    /// Latent coordinates of the closest chart point, `h̃†(x)`.
    fn coords(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `P(x) = h̃(h̃†(x))` and its `D×D` Jacobian, column-major.
    fn projection_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl Chart for ChartFlow {
    fn latent_dim(&self) -> usize {
        ChartFlow::latent_dim(self)
    }
    fn ambient_dim(&self) -> usize {
        ChartFlow::ambient_dim(self)
    }
    fn embed<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        self.h_tilde(z).expect("latent dimension checked by caller")
    }
    fn coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.h_dagger(x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("coords", "non-finite latent point"));
        }
        Ok(z)
    }
    fn projection_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("projection_jacobian", ChartFlow::ambient_dim(self), x.len())?;
        engine::project_with_jacobian(self, x)
    }
}

/// Adapter exposing a chart's embedding as a [`SmoothFn`].
pub struct EmbeddingOf<'a, C>(pub &'a C);

impl<C: Chart> SmoothFn for EmbeddingOf<'_, C> {
    fn input_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn output_dim(&self) -> usize {
        self.0.ambient_dim()
    }
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        self.0.embed(z)
    }
}

fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { op, expected, got });
    }
    Ok(())
}

/// `P = E∘c` with `J_P = J_E · J_c`, for analytic charts with explicit
/// coordinate derivatives `J_c` (`d×D`).
fn compose_projection<C: Chart>(
    chart: &C,
    x: &[f64],
    jc: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = chart.coords(x)?;
    let (p, je) = autodiff::value_and_jacobian(&EmbeddingOf(chart), &z)?;
    let jp = je * jc;
    Ok((p, jp.as_slice().to_vec()))
}

/// Affine chart `x = A z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearChart {
    pub a: DMatrix<f64>,
    pub offset: Vec<f64>,
}

impl LinearChart {
    pub fn new(a: DMatrix<f64>, offset: Vec<f64>) -> Result<Self> {
        check_dim("LinearChart::new", a.nrows(), offset.len())?;
        if a.ncols() > a.nrows() {
            return Err(Error::Validation("linear chart needs d <= D".into()));
        }
        Ok(LinearChart { a, offset })
    }

    fn pinv(&self) -> Result<DMatrix<f64>> {
        let g = self.a.transpose() * &self.a;
        let chol = g.cholesky().ok_or(Error::SingularMetric {
            context: "linear chart",
        })?;
        Ok(chol.solve(&self.a.transpose()))
    }
}

impl Chart for LinearChart {
    fn latent_dim(&self) -> usize {
        self.a.ncols()
    }
    fn ambient_dim(&self) -> usize {
        self.a.nrows()
    }
    fn embed<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        (0..self.a.nrows())
            .map(|i| {
                let mut acc = S::from_f64(self.offset[i]);
                for (j, &zj) in z.iter().enumerate() {
                    acc += zj * self.a[(i, j)];
                }
                acc
            })
            .collect()
    }
    fn coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("LinearChart::coords", self.ambient_dim(), x.len())?;
        let r: Vec<f64> = x.iter().zip(&self.offset).map(|(a, b)| a - b).collect();
        Ok((self.pinv()? * DVector::from_vec(r)).as_slice().to_vec())
    }
    fn projection_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let jc = self.pinv()?;
        compose_projection(self, x, &jc)
    }
}

/// Arclength chart of a circle, `x = r (cos z, sin z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleChart {
    pub radius: f64,
}

impl Chart for CircleChart {
    fn latent_dim(&self) -> usize {
        1
    }
    fn ambient_dim(&self) -> usize {
        2
    }
    fn embed<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let t = z[0] / self.radius;
        vec![t.cos() * self.radius, t.sin() * self.radius]
    }
    fn coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("CircleChart::coords", 2, x.len())?;
        Ok(vec![self.radius * x[1].atan2(x[0])])
    }
    fn projection_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let rr = x[0] * x[0] + x[1] * x[1];
        if rr == 0.0 {
            return Err(Error::numerical("CircleChart", "projection of the origin"));
        }
        let jc = DMatrix::from_row_slice(1, 2, &[-x[1] / rr, x[0] / rr]) * self.radius;
        compose_projection(self, x, &jc)
    }
}

/// Polar-angle chart of the unit sphere,
/// `x = (sin z₁ cos z₂, sin z₁ sin z₂, cos z₁)`; singular at the poles.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SphereAngleChart;

impl Chart for SphereAngleChart {
    fn latent_dim(&self) -> usize {
        2
    }
    fn ambient_dim(&self) -> usize {
        3
    }
    fn embed<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let (s1, c1) = (z[0].sin(), z[0].cos());
        vec![s1 * z[1].cos(), s1 * z[1].sin(), c1]
    }
    fn coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("SphereAngleChart::coords", 3, x.len())?;
        let r = norm(x);
        if r == 0.0 {
            return Err(Error::numerical(
                "SphereAngleChart",
                "projection of the origin",
            ));
        }
        Ok(vec![(x[2] / r).clamp(-1.0, 1.0).acos(), x[1].atan2(x[0])])
    }
    fn projection_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = norm(x);
        let rho2 = x[0] * x[0] + x[1] * x[1];
        if rho2 == 0.0 {
            return Err(Error::SingularMetric {
                context: "sphere angle chart pole",
            });
        }
        let c = x[2] / r;
        let k = -1.0 / (1.0 - c * c).sqrt();
        let mut jc = DMatrix::zeros(2, 3);
        for i in 0..3 {
            let e3 = if i == 2 { 1.0 / r } else { 0.0 };
            jc[(0, i)] = k * (e3 - x[2] * x[i] / r.powi(3));
        }
        jc[(1, 0)] = -x[1] / rho2;
        jc[(1, 1)] = x[0] / rho2;
        compose_projection(self, x, &jc)
    }
}

/// Pullback metric `G = JᵀJ` at a latent point with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct MetricMatrix {
    g: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Relative eigenvalue floor below which the metric counts as singular.
const SINGULAR_RTOL: f64 = 1e-12;

impl MetricMatrix {
    pub fn new(g: DMatrix<f64>, context: &'static str) -> Result<Self> {
        let scale = g.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let chol = g
            .clone()
            .cholesky()
            .ok_or(Error::SingularMetric { context })?;
        let min_pivot = chol
            .l_dirty()
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v * v));
        if !(scale.is_finite() && scale > 0.0 && min_pivot > SINGULAR_RTOL * scale) {
            return Err(Error::SingularMetric { context });
        }
        Ok(MetricMatrix { g, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// `G⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.chol
            .solve(&DVector::from_column_slice(b))
            .as_slice()
            .to_vec()
    }

    /// `vᵀ G v`.
    pub fn norm_sq(&self, v: &[f64]) -> f64 {
        let v = DVector::from_column_slice(v);
        (v.transpose() * &self.g * &v)[(0, 0)]
    }
}

/// Embedding Jacobian and metric at one latent point.
struct Local {
    jac: DMatrix<f64>,
    metric: MetricMatrix,
}

fn local<C: Chart>(chart: &C, z: &[f64]) -> Result<Local> {
    check_dim("pullback_metric", chart.latent_dim(), z.len())?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("latent point is not finite".into()));
    }
    let (_, jac) = autodiff::value_and_jacobian(&EmbeddingOf(chart), z)?;
    let metric = MetricMatrix::new(jac.transpose() * &jac, "pullback metric")?;
    Ok(Local { jac, metric })
}

/// `G(z) = J_h̃(z)ᵀ J_h̃(z)`.
pub fn pullback_metric<C: Chart>(chart: &C, z: &[f64]) -> Result<MetricMatrix> {
    Ok(local(chart, z)?.metric)
}

struct Acceleration {
    local: Local,
    q: Vec<f64>,
    zdd: Vec<f64>,
}

fn acceleration<C: Chart>(chart: &C, z: &[f64], zdot: &[f64]) -> Result<Acceleration> {
    check_dim("geodesic_acceleration", chart.latent_dim(), zdot.len())?;
    let local = local(chart, z)?;
    let q = autodiff::quadratic_form(&EmbeddingOf(chart), z, zdot)?;
    let b = local.jac.transpose() * DVector::from_column_slice(&q);
    let zdd: Vec<f64> = local
        .metric
        .solve(b.as_slice())
        .iter()
        .map(|v| -v)
        .collect();
    if zdd.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "geodesic_acceleration",
            "non-finite value",
        ));
    }
    Ok(Acceleration { local, q, zdd })
}

/// Latent geodesic acceleration `z̈ = −G⁻¹ Jᵀ q`.
pub fn geodesic_acceleration<C: Chart>(chart: &C, z: &[f64], zdot: &[f64]) -> Result<Vec<f64>> {
    Ok(acceleration(chart, z, zdot)?.zdd)
}

/// Ambient acceleration `q + J z̈` of the geodesic through `(z, ż)`.
pub fn ambient_acceleration<C: Chart>(chart: &C, z: &[f64], zdot: &[f64]) -> Result<Vec<f64>> {
    let a = acceleration(chart, z, zdot)?;
    let jz = &a.local.jac * DVector::from_column_slice(&a.zdd);
    Ok(a.q.iter().zip(jz.iter()).map(|(q, j)| q + j).collect())
}

/// Latent velocity whose pushforward best matches the ambient `v` in least
/// squares: `ż = G⁻¹ Jᵀ v`.
pub fn latent_velocity<C: Chart>(chart: &C, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim("latent_velocity", chart.ambient_dim(), v.len())?;
    let l = local(chart, z)?;
    let b = l.jac.transpose() * DVector::from_column_slice(v);
    Ok(l.metric.solve(b.as_slice()))
}

/// One point of a geodesic, in latent and ambient form
/// (`x = h̃(z)`, `v = J ż`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicState {
    pub t: f64,
    pub z: Vec<f64>,
    pub zdot: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl GeodesicState {
    fn from_latent<C: Chart>(chart: &C, t: f64, z: &[f64], zdot: &[f64]) -> Result<Self> {
        let (x, v) = autodiff::value_and_jvp(&EmbeddingOf(chart), z, zdot)?;
        Ok(GeodesicState {
            t,
            z: z.to_vec(),
            zdot: zdot.to_vec(),
            x,
            v,
        })
    }

    /// Riemannian speed `‖ż‖_G = ‖v‖`.
    pub fn speed(&self) -> f64 {
        norm(&self.v)
    }
}

/// Sampled geodesic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<GeodesicState>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&GeodesicState> {
        self.states.last()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Ambient positions.
    pub fn positions(&self) -> Points {
        let d = self.states.first().map_or(0, |s| s.x.len());
        let mut p = Points::with_capacity(d, self.states.len());
        for s in &self.states {
            p.push(&s.x).expect("uniform dimension");
        }
        p
    }

    /// CSV with columns `t, x1..xD`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let d = self.states.first().map_or(0, |s| s.x.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        writeln!(w, "{}", header.join(","))?;
        for s in &self.states {
            let mut row = vec![format!("{:e}", s.t)];
            row.extend(s.x.iter().map(|v| format!("{v:e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Geodesic integration failure with everything computed before it.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} samples)", partial.len())]
pub struct GeodesicFailure {
    pub error: Error,
    pub partial: Trajectory,
}

impl From<GeodesicFailure> for Error {
    fn from(f: GeodesicFailure) -> Self {
        f.error
    }
}

impl From<Error> for GeodesicFailure {
    fn from(error: Error) -> Self {
        GeodesicFailure {
            error,
            partial: Trajectory::default(),
        }
    }
}

/// Exponential-map settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpMapOptions {
    pub integrator: Integrator,
    /// Largest accepted distance between `x₀` and its reconstruction.
    pub surface_tol: f64,
}

impl Default for ExpMapOptions {
    fn default() -> Self {
        ExpMapOptions {
            integrator: Integrator::default(),
            surface_tol: 1e-2,
        }
    }
}

/// Integrates the latent geodesic ODE from `(z₀, ż₀)` over `[0, t_end]`.
pub fn integrate_latent<C: Chart>(
    chart: &C,
    z0: &[f64],
    zdot0: &[f64],
    t_end: f64,
    integrator: Integrator,
) -> std::result::Result<Trajectory, GeodesicFailure> {
    let d = chart.latent_dim();
    check_dim("exp_map", d, z0.len())?;
    check_dim("exp_map", d, zdot0.len())?;
    let rhs = |_: f64, y: &[f64]| -> Result<Vec<f64>> {
        let mut out = y[d..].to_vec();
        out.extend(geodesic_acceleration(chart, &y[..d], &y[d..])?);
        Ok(out)
    };
    let y0: Vec<f64> = z0.iter().chain(zdot0).copied().collect();
    let solved = match integrator {
        Integrator::Rk4 { steps_per_unit } => {
            let steps = ((steps_per_unit as f64 * t_end.abs() - 1e-9).ceil() as usize).max(1);
            ode::rk4(rhs, 0.0, &y0, t_end, steps)
        }
        Integrator::Rk45 { rtol } => ode::rk45(rhs, 0.0, &y0, t_end, rtol, rtol * 1e-3),
    };
    let to_traj = |samples: ode::Samples| -> Result<Trajectory> {
        let states = samples
            .iter()
            .map(|(t, y)| GeodesicState::from_latent(chart, *t, &y[..d], &y[d..]))
            .collect::<Result<_>>()?;
        Ok(Trajectory { states })
    };
    match solved {
        Ok(samples) => Ok(to_traj(samples)?),
        Err(PartialSolution { samples, error }) => Err(GeodesicFailure {
            error,
            partial: to_traj(samples).unwrap_or_default(),
        }),
    }
}

/// `Exp_{x₀}(t_end · v₀)` on one chart. `v₀` is projected onto the tangent
/// space at `x₀` by the least-squares latent solve.
pub fn exp_map<C: Chart>(
    chart: &C,
    x0: &[f64],
    v0: &[f64],
    t_end: f64,
    opts: &ExpMapOptions,
) -> std::result::Result<Trajectory, GeodesicFailure> {
    check_dim("exp_map", chart.ambient_dim(), x0.len())?;
    check_dim("exp_map", chart.ambient_dim(), v0.len())?;
    let z0 = chart.coords(x0)?;
    let xr: Vec<f64> = chart.embed(&z0);
    let residual = dist2(x0, &xr).sqrt();
    if !(residual <= opts.surface_tol) {
        return Err(Error::OffManifold {
            residual,
            tol: opts.surface_tol,
        }
        .into());
    }
    let zdot0 = latent_velocity(chart, &z0, v0)?;
    integrate_latent(chart, &z0, &zdot0, t_end, opts.integrator)
}

/// How the spline controls are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurveOptimizer {
    /// Adam on the discrete energy, learning rate decayed geometrically to
    /// 1% of its initial value over the iteration budget.
    #[default]
    Adam,
    /// Levenberg–Marquardt on the segment residuals `√T (P_{t+1} − P_t)`.
    GaussNewton,
}

/// Geodesic boundary-value solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogMapConfig {
    /// Interior spline knots `K`.
    pub controls: usize,
    /// Energy samples `T` (segments).
    pub samples: usize,
    pub iterations: usize,
    pub optimizer: CurveOptimizer,
    pub learning_rate: f64,
    /// Relative energy decrease below which the optimization has converged.
    pub tol: f64,
}

impl Default for LogMapConfig {
    fn default() -> Self {
        LogMapConfig {
            controls: 8,
            samples: 64,
            iterations: 500,
            optimizer: CurveOptimizer::Adam,
            learning_rate: 1e-2,
            tol: 1e-7,
        }
    }
}

impl LogMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Config("geometry.samples must be >= 2".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("geometry.iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "geometry.learning_rate must be positive".into(),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("geometry.tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of a geodesic boundary-value solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMap {
    pub curve: SplineCurve,
    /// Projected samples `P(γ(t_j))`, `j = 0..=T`.
    pub projected: Points,
    /// Initial velocity of the unit-time geodesic.
    pub v0: Vec<f64>,
    /// Discretized length `Σ‖ΔP‖`.
    pub length: f64,
    pub energy: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Energy at every iteration.
    pub energy_trace: Vec<f64>,
}

/// Projected curve samples with the Jacobian at each interior sample.
struct Evaluated {
    points: Points,
    jacs: Vec<Vec<f64>>,
    energy: f64,
}

fn evaluate<P>(project: &P, curve: &SplineCurve, ends: (&[f64], &[f64])) -> Result<Evaluated>
where
    P: Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let raw = curve.samples();
    let t = raw.len() - 1;
    let mut points = Points::with_capacity(raw.dim(), t + 1);
    let mut jacs = Vec::with_capacity(t + 1);
    points.push(ends.0)?;
    jacs.push(Vec::new());
    for j in 1..t {
        let (p, jp) = project(raw.row(j))?;
        points.push(&p)?;
        jacs.push(jp);
    }
    points.push(ends.1)?;
    jacs.push(Vec::new());
    let energy = curve_energy(&points);
    if !energy.is_finite() {
        return Err(Error::numerical("log_map", "non-finite curve energy"));
    }
    Ok(Evaluated {
        points,
        jacs,
        energy,
    })
}

/// `∂E/∂controls` via `J_Pᵀ` at each interior sample.
fn energy_gradient(ev: &Evaluated, basis: &SplineBasis) -> Vec<f64> {
    let dim = ev.points.dim();
    let t = ev.points.len() - 1;
    let mut grad = vec![0.0; basis.controls * dim];
    let mut gp = vec![0.0; dim];
    for j in 1..t {
        let (pm, p, pp) = (ev.points.row(j - 1), ev.points.row(j), ev.points.row(j + 1));
        for a in 0..dim {
            gp[a] = 2.0 * t as f64 * (2.0 * p[a] - pm[a] - pp[a]);
        }
        let jac = &ev.jacs[j];
        for k in 0..basis.controls {
            let w = basis.weight(j, k + 1);
            if w == 0.0 {
                continue;
            }
            for b in 0..dim {
                let col = &jac[b * dim..(b + 1) * dim];
                let g: f64 = col.iter().zip(&gp).map(|(c, g)| c * g).sum();
                grad[k * dim + b] += w * g;
            }
        }
    }
    grad
}

/// Levenberg–Marquardt step for damping `mu`; `None` if the damped normal
/// equations are singular.
fn lm_step(ev: &Evaluated, basis: &SplineBasis, mu: f64) -> Option<Vec<f64>> {
    let dim = ev.points.dim();
    let t = ev.points.len() - 1;
    let n = basis.controls * dim;
    let st = (t as f64).sqrt();
    let mut a = DMatrix::<f64>::zeros(t * dim, n);
    let mut r = DVector::zeros(t * dim);
    for j in 0..t {
        let (p0, p1) = (ev.points.row(j), ev.points.row(j + 1));
        for i in 0..dim {
            r[j * dim + i] = st * (p1[i] - p0[i]);
        }
        for (end, sign) in [(j, -1.0), (j + 1, 1.0)] {
            if end == 0 || end == t {
                continue;
            }
            let jac = &ev.jacs[end];
            for k in 0..basis.controls {
                let w = basis.weight(end, k + 1);
                if w == 0.0 {
                    continue;
                }
                for b in 0..dim {
                    for i in 0..dim {
                        a[(j * dim + i, k * dim + b)] += sign * st * w * jac[b * dim + i];
                    }
                }
            }
        }
    }
    let mut normal = a.transpose() * &a;
    let g = a.transpose() * r;
    let floor = normal.diagonal().max() * 1e-12;
    for i in 0..n {
        normal[(i, i)] += mu * normal[(i, i)].max(floor) + floor;
    }
    let chol = normal.cholesky()?;
    Some(chol.solve(&(-g)).as_slice().to_vec())
}

/// Minimizes the energy of the projected spline between `x0` and `x1`.
/// `project` returns `P(x)` and its Jacobian (column-major `D×D`). The
/// optimization starts from the chord, or from `alternative` when its
/// projected energy is lower.
pub(crate) fn optimize_curve<P>(
    project: &P,
    x0: &[f64],
    x1: &[f64],
    cfg: &LogMapConfig,
    alternative: Option<SplineCurve>,
) -> Result<LogMap>
where
    P: Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    cfg.validate()?;
    let mut curve = SplineCurve::chord(x0, x1, cfg.controls, cfg.samples)?;
    let p0 = project(x0)?.0;
    let p1 = project(x1)?.0;
    let ends = (p0.as_slice(), p1.as_slice());
    let mut ev = evaluate(project, &curve, ends)?;
    if let Some(alt) = alternative {
        if let Ok(aev) = evaluate(project, &alt, ends) {
            if aev.energy < ev.energy {
                curve = alt;
                ev = aev;
            }
        }
    }
    let mut trace = vec![ev.energy];
    let mut best = (ev.energy, curve.controls.clone(), ev.points.clone());
    let mut converged = cfg.controls == 0 || ev.energy == 0.0;
    let mut iterations = 0;
    let n = curve.controls.len();

    match cfg.optimizer {
        CurveOptimizer::Adam => {
            const WINDOW: usize = 50;
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let mut m = vec![0.0; n];
            let mut v = vec![0.0; n];
            let decay = 0.01f64.powf(1.0 / cfg.iterations as f64);
            let mut best_trace = vec![ev.energy];
            while !converged && iterations < cfg.iterations {
                iterations += 1;
                let g = energy_gradient(&ev, &curve.basis);
                let lr = cfg.learning_rate * decay.powi(iterations as i32 - 1);
                let (c1, c2) = (
                    1.0 - b1.powi(iterations as i32),
                    1.0 - b2.powi(iterations as i32),
                );
                for i in 0..n {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    curve.controls[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                ev = evaluate(project, &curve, ends)?;
                trace.push(ev.energy);
                if ev.energy < best.0 {
                    best = (ev.energy, curve.controls.clone(), ev.points.clone());
                }
                best_trace.push(best.0);
                if iterations >= WINDOW {
                    let before = best_trace[iterations - WINDOW];
                    if before - best.0 <= cfg.tol * best.0 {
                        converged = true;
                    }
                }
            }
        }
        CurveOptimizer::GaussNewton => {
            let mut mu = 1e-3;
            while !converged && iterations < cfg.iterations {
                iterations += 1;
                let mut accepted = false;
                for _ in 0..12 {
                    let Some(step) = lm_step(&ev, &curve.basis, mu) else {
                        mu *= 10.0;
                        continue;
                    };
                    let mut trial = curve.clone();
                    for (c, s) in trial.controls.iter_mut().zip(&step) {
                        *c += s;
                    }
                    let tev = match evaluate(project, &trial, ends) {
                        Ok(e) if e.energy <= ev.energy => e,
                        Ok(_) | Err(_) => {
                            mu *= 4.0;
                            continue;
                        }
                    };
                    let drop = ev.energy - tev.energy;
                    curve = trial;
                    ev = tev;
                    mu = (mu / 3.0).max(1e-12);
                    accepted = true;
                    if drop <= cfg.tol * ev.energy {
                        converged = true;
                    }
                    break;
                }
                trace.push(ev.energy);
                if ev.energy < best.0 {
                    best = (ev.energy, curve.controls.clone(), ev.points.clone());
                }
                if !accepted {
                    // no descent direction at any damping: a stationary point
                    // up to round-off
                    converged = true;
                }
            }
        }
    }

    let (energy, controls, projected) = best;
    curve.controls = controls;
    let t = projected.len() - 1;
    let v0: Vec<f64> = projected
        .row(1)
        .iter()
        .zip(projected.row(0))
        .map(|(a, b)| t as f64 * (a - b))
        .collect();
    Ok(LogMap {
        curve,
        length: curve_length(&projected),
        projected,
        v0,
        energy,
        converged,
        iterations,
        energy_trace: trace,
    })
}

/// Geodesic between two points near one chart's surface, found by
/// minimizing the energy of the projected spline `h̃(h̃†(γ(t)))`.
pub fn log_map_single<C: Chart>(
    chart: &C,
    x0: &[f64],
    x1: &[f64],
    cfg: &LogMapConfig,
) -> Result<LogMap> {
    check_dim("log_map", chart.ambient_dim(), x0.len())?;
    check_dim("log_map", chart.ambient_dim(), x1.len())?;
    optimize_curve(&|x: &[f64]| chart.projection_jacobian(x), x0, x1, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowConfig;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_flow(d: usize, big_d: usize, seed: u64, scale: f64) -> ChartFlow {
        let cfg = FlowConfig {
            latent_dim: d,
            ambient_dim: big_d,
            g_layers: 2,
            h_layers: 3,
            hidden: 6,
            s_max: 2.0,
        };
        let mut f = ChartFlow::new(cfg, seed).unwrap();
        f.randomize(scale, seed + 100);
        f
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_flow_metric_is_identity() {
        let f = ChartFlow::new(FlowConfig::default(), 3).unwrap();
        let g = pullback_metric(&f, &[0.3, -1.2]).unwrap();
        assert!((g.matrix() - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn linear_chart_metric_and_zero_acceleration() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        let c = LinearChart::new(a.clone(), vec![0.1, 0.2, 0.3]).unwrap();
        let g = pullback_metric(&c, &[0.4, -0.9]).unwrap();
        assert!((g.matrix() - a.transpose() * &a).abs().max() < 1e-14);
        let zdd = geodesic_acceleration(&c, &[0.4, -0.9], &[1.3, 0.2]).unwrap();
        assert!(zdd.iter().all(|v| *v == 0.0));
        let ax = ambient_acceleration(&c, &[0.4, -0.9], &[1.3, 0.2]).unwrap();
        assert!(ax.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn circle_chart_is_flat_with_centripetal_ambient_acceleration() {
        let c = CircleChart { radius: 1.0 };
        for z in [-2.0, 0.0, 0.7, 3.0] {
            let g = pullback_metric(&c, &[z]).unwrap();
            assert!((g.matrix()[(0, 0)] - 1.0).abs() < 1e-14);
            assert!(geodesic_acceleration(&c, &[z], &[1.0]).unwrap()[0].abs() < 1e-14);
            let a = ambient_acceleration(&c, &[z], &[1.0]).unwrap();
            assert!(close(&a, &[-z.cos(), -z.sin()], 1e-14));
        }
    }

    fn sphere_christoffel(z: &[f64], zd: &[f64]) -> Vec<f64> {
        // Γ¹₂₂ = −sin z₁ cos z₁, Γ²₁₂ = Γ²₂₁ = cot z₁
        let (s, c) = (z[0].sin(), z[0].cos());
        vec![s * c * zd[1] * zd[1], -2.0 * c / s * zd[0] * zd[1]]
    }

    #[test]
    fn sphere_acceleration_matches_christoffel_symbols() {
        assert!(close(
            &geodesic_acceleration(&SphereAngleChart, &[FRAC_PI_2, 0.0], &[0.0, 1.0]).unwrap(),
            &[0.0, 0.0],
            1e-14
        ));
        for (z, zd) in [
            ([0.7, 0.3], [0.2, -1.1]),
            ([2.1, -1.0], [1.5, 0.4]),
            ([1.2, 2.5], [-0.3, 0.8]),
        ] {
            let got = geodesic_acceleration(&SphereAngleChart, &z, &zd).unwrap();
            assert!(close(&got, &sphere_christoffel(&z, &zd), 1e-12), "{got:?}");
        }
    }

    #[test]
    fn sphere_ambient_acceleration_is_normal() {
        let z = [0.9, -0.4];
        let zd = [0.6, 1.3];
        let s = GeodesicState::from_latent(&SphereAngleChart, 0.0, &z, &zd).unwrap();
        let a = ambient_acceleration(&SphereAngleChart, &z, &zd).unwrap();
        let v2 = s.speed().powi(2);
        let expect: Vec<f64> = s.x.iter().map(|x| -v2 * x).collect();
        assert!(close(&a, &expect, 1e-12));
    }

    #[test]
    fn exp_map_follows_great_circles() {
        let x0 = [1.0, 0.0, 0.0];
        let x0 = SphereAngleChart.embed(&SphereAngleChart.coords(&x0).unwrap());
        let v0 = [0.0, 0.6, 0.8];
        let opts = ExpMapOptions {
            integrator: Integrator::Rk4 {
                steps_per_unit: 1000,
            },
            ..Default::default()
        };
        let traj = exp_map(&SphereAngleChart, &x0, &v0, 1.0, &opts).unwrap();
        let end = &traj.last().unwrap().x;
        let expect = [1f64.cos(), 0.6 * 1f64.sin(), 0.8 * 1f64.sin()];
        assert!(dist2(end, &expect).sqrt() < 1e-8);
        assert_eq!(traj.len(), 1001);
    }

    #[test]
    fn zero_velocity_rests() {
        let f = random_flow(2, 3, 4, 0.2);
        let x0 = f.h_tilde(&[0.2, 0.1]).unwrap();
        let traj = exp_map(&f, &x0, &[0.0; 3], 1.0, &ExpMapOptions::default()).unwrap();
        assert!(close(&traj.last().unwrap().x, &x0, 1e-12));
    }

    #[test]
    fn off_manifold_start_is_rejected() {
        let r = exp_map(
            &SphereAngleChart,
            &[2.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            1.0,
            &ExpMapOptions::default(),
        );
        assert!(matches!(r.unwrap_err().error, Error::OffManifold { .. }));
    }

    #[test]
    fn singular_metric_returns_partial_trajectory() {
        // heading straight for the pole of the angle chart
        let x0 = SphereAngleChart.embed(&[1.0, 0.0]);
        let v0 = [-(1f64.cos()), 0.0, 1f64.sin()];
        let r = exp_map(&SphereAngleChart, &x0, &v0, 3.0, &ExpMapOptions::default());
        let f = r.unwrap_err();
        assert!(f.error.is_numerical(), "{}", f.error);
        assert!(f.partial.len() > 50);
    }

    fn speed_spread(traj: &Trajectory) -> f64 {
        let s: Vec<f64> = traj.states.iter().map(|s| s.speed()).collect();
        let max = s.iter().cloned().fold(f64::MIN, f64::max);
        let min = s.iter().cloned().fold(f64::MAX, f64::min);
        (max - min) / max
    }

    #[test]
    fn speed_is_conserved_on_a_random_flow() {
        let f = random_flow(2, 3, 5, 0.25);
        let x0 = f.h_tilde(&[0.1, -0.2]).unwrap();
        let traj = exp_map(&f, &x0, &[0.3, -0.4, 0.2], 1.0, &ExpMapOptions::default()).unwrap();
        assert!(speed_spread(&traj) < 5e-3, "{}", speed_spread(&traj));
    }

    #[test]
    fn ambient_acceleration_matches_trajectory_curvature() {
        let f = random_flow(2, 3, 6, 0.25);
        let x0 = f.h_tilde(&[-0.3, 0.2]).unwrap();
        let opts = ExpMapOptions {
            integrator: Integrator::Rk4 {
                steps_per_unit: 1000,
            },
            ..Default::default()
        };
        let traj = exp_map(&f, &x0, &[0.5, 0.2, -0.3], 1.0, &opts).unwrap();
        let h = 1e-3;
        let mut worst = 0.0f64;
        for i in (10..990).step_by(70) {
            let (a, b, c) = (&traj.states[i - 1], &traj.states[i], &traj.states[i + 1]);
            let fd: Vec<f64> = (0..3)
                .map(|k| (a.x[k] - 2.0 * b.x[k] + c.x[k]) / (h * h))
                .collect();
            let acc = ambient_acceleration(&f, &b.z, &b.zdot).unwrap();
            worst = worst.max(
                fd.iter()
                    .zip(&acc)
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max),
            );
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn rk45_agrees_with_rk4() {
        let f = random_flow(2, 3, 7, 0.25);
        let x0 = f.h_tilde(&[0.0, 0.3]).unwrap();
        let v0 = [0.4, 0.1, 0.1];
        let a = exp_map(&f, &x0, &v0, 1.0, &ExpMapOptions::default()).unwrap();
        let b = exp_map(
            &f,
            &x0,
            &v0,
            1.0,
            &ExpMapOptions {
                integrator: Integrator::Rk45 { rtol: 1e-8 },
                ..Default::default()
            },
        )
        .unwrap();
        assert!(dist2(&a.last().unwrap().x, &b.last().unwrap().x).sqrt() < 1e-6);
    }

    #[test]
    fn analytic_projection_jacobians_match_finite_differences() {
        fn check<C: Chart>(c: &C, x: &[f64]) {
            let (_, jp) = c.projection_jacobian(x).unwrap();
            let n = x.len();
            let h = 1e-6;
            for j in 0..n {
                let mut xp = x.to_vec();
                xp[j] += h;
                let mut xm = x.to_vec();
                xm[j] -= h;
                let pp: Vec<f64> = c.embed(&c.coords(&xp).unwrap());
                let pm: Vec<f64> = c.embed(&c.coords(&xm).unwrap());
                for i in 0..n {
                    let fd = (pp[i] - pm[i]) / (2.0 * h);
                    assert!(
                        (fd - jp[j * n + i]).abs() < 1e-7,
                        "{fd} vs {}",
                        jp[j * n + i]
                    );
                }
            }
        }
        check(&SphereAngleChart, &[0.3, -0.5, 1.2]);
        check(&CircleChart { radius: 1.0 }, &[0.7, 1.4]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        check(
            &LinearChart::new(a, vec![0.0; 3]).unwrap(),
            &[0.3, 0.1, 0.9],
        );
    }

    #[test]
    fn log_map_of_identical_points_is_zero() {
        let x = SphereAngleChart.embed(&[1.0, 0.5]);
        let r = log_map_single(&SphereAngleChart, &x, &x, &LogMapConfig::default()).unwrap();
        assert!(r.length < 1e-12);
        assert!(r.v0.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn log_map_on_the_sphere_recovers_the_great_circle() {
        let x0 = SphereAngleChart.embed(&[FRAC_PI_2, 0.0]);
        let x1 = SphereAngleChart.embed(&[FRAC_PI_2 - 0.6, 0.9]);
        let truth = crate::points::dot(&x0, &x1).clamp(-1.0, 1.0).acos();
        for optimizer in [CurveOptimizer::Adam, CurveOptimizer::GaussNewton] {
            let cfg = LogMapConfig {
                optimizer,
                ..Default::default()
            };
            let r = log_map_single(&SphereAngleChart, &x0, &x1, &cfg).unwrap();
            assert!(
                (r.length - truth).abs() / truth < 1e-3,
                "{optimizer:?} {}",
                r.length
            );
            let chord = SplineCurve::chord(&x0, &x1, 0, 64).unwrap().samples();
            let mut projected = Points::new(3);
            for p in chord.rows() {
                let (q, _) = SphereAngleChart.projection_jacobian(p).unwrap();
                projected.push(&q).unwrap();
            }
            let chord_length = curve_length(&projected);
            assert!(
                r.length <= chord_length * (1.0 + 1e-4),
                "{} vs {chord_length}",
                r.length
            );
        }
    }

    #[test]
    fn exp_and_log_round_trip_on_the_sphere() {
        let x0 = SphereAngleChart.embed(&[1.1, 0.4]);
        let z0 = SphereAngleChart.coords(&x0).unwrap();
        let (_, j) = autodiff::value_and_jacobian(&EmbeddingOf(&SphereAngleChart), &z0).unwrap();
        for zd in [[0.3, 0.2], [-0.2, 0.4], [0.1, -0.3]] {
            let v = (&j * DVector::from_column_slice(&zd)).as_slice().to_vec();
            let x1 = exp_map(&SphereAngleChart, &x0, &v, 1.0, &ExpMapOptions::default())
                .unwrap()
                .last()
                .unwrap()
                .x
                .clone();
            let cfg = LogMapConfig {
                optimizer: CurveOptimizer::GaussNewton,
                samples: 256,
                ..Default::default()
            };
            let r = log_map_single(&SphereAngleChart, &x0, &x1, &cfg).unwrap();
            assert!(r.converged);
            let err = dist2(&r.v0, &v).sqrt() / norm(&v);
            assert!(err < 2e-2, "{err}");
        }
    }

    #[test]
    fn adam_energy_is_monotone_over_windows() {
        let x0 = SphereAngleChart.embed(&[FRAC_PI_2, -0.7]);
        let x1 = SphereAngleChart.embed(&[0.9, 0.8]);
        let r = log_map_single(&SphereAngleChart, &x0, &x1, &LogMapConfig::default()).unwrap();
        let e = &r.energy_trace;
        for i in 0..e.len().saturating_sub(50) {
            assert!(e[i + 50] <= e[i] * (1.0 + 1e-12), "window at {i}");
        }
        assert!(*e.last().unwrap() < e[0]);
        assert!(PI > r.length);
    }
}
