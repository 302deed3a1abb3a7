//! Geometry on an atlas: responsibility-weighted projection, multi-chart
//! exponential maps, geodesics and distance matrices.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{filter_responsibilities, Atlas};
use crate::error::{Error, Result};
use crate::geo_single::{
    integrate_latent, latent_velocity, optimize_curve, Chart, EmbeddingOf, LogMap, LogMapConfig,
    SplineCurve,
};
use crate::ode::{self, Integrator};
use crate::points::{dist2, norm, Points};

/// A point mapped onto the learned manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub x_raw: Vec<f64>,
    pub x_proj: Vec<f64>,
    /// Filtered, renormalized responsibilities (zero for inactive charts).
    pub resp: Vec<f64>,
    pub active_charts: Vec<usize>,
}

fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { op, expected, got });
    }
    Ok(())
}

/// Active charts at `x`. A threshold that leaves no chart standing is a
/// configuration problem (it needs a threshold above `1/C`).
fn active(atlas: &Atlas, x: &[f64]) -> Result<Vec<(usize, f64)>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("point is not finite".into()));
    }
    let row = atlas.responsibility_row(x)?;
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "responsibilities",
            "no chart has a finite density",
        ));
    }
    filter_responsibilities(&row, atlas.resp_threshold).map_err(|e| match e {
        Error::NoActiveChart { threshold } => Error::Config(format!(
            "no chart reaches the responsibility threshold {threshold}"
        )),
        e => e,
    })
}

/// Renormalize after dropping charts that failed.
fn renormalize(parts: &mut [(usize, f64)]) {
    let s: f64 = parts.iter().map(|p| p.1).sum();
    for p in parts.iter_mut() {
        p.1 /= s;
    }
}

/// `Σ_c r_c(x) h̃_c(h̃_c†(x))` over the active charts.
pub fn project_to_manifold(atlas: &Atlas, x: &[f64]) -> Result<ProjectedPoint> {
    check_dim("project_to_manifold", atlas.ambient_dim(), x.len())?;
    let act = active(atlas, x)?;
    let mut x_proj = vec![0.0; x.len()];
    let mut resp = vec![0.0; atlas.n_charts()];
    for &(c, w) in &act {
        let (rec, _) = atlas.charts[c].reconstruct(x)?;
        for (p, r) in x_proj.iter_mut().zip(&rec) {
            *p += w * r;
        }
        resp[c] = w;
    }
    Ok(ProjectedPoint {
        x_raw: x.to_vec(),
        x_proj,
        resp,
        active_charts: act.iter().map(|a| a.0).collect(),
    })
}

/// Atlas projection and its Jacobian `Σ_c r_c J_{P_c}` (responsibilities
/// held fixed). Charts whose projection fails are dropped.
fn projection_jacobian(atlas: &Atlas, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let mut parts = Vec::new();
    let mut last_err = None;
    for (c, w) in active(atlas, x)? {
        match atlas.charts[c].projection_jacobian(x) {
            Ok(pj) => parts.push((w, pj)),
            Err(e) if e.is_numerical() => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    if parts.is_empty() {
        return Err(last_err.unwrap_or(Error::numerical("projection", "no active chart")));
    }
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let mut p = vec![0.0; n];
    let mut j = vec![0.0; n * n];
    for (w, (pc, jc)) in parts {
        let w = w / total;
        for (a, b) in p.iter_mut().zip(&pc) {
            *a += w * b;
        }
        for (a, b) in j.iter_mut().zip(&jc) {
            *a += w * b;
        }
    }
    Ok((p, j))
}

/// Settings shared by the multi-chart exponential maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiExpConfig {
    /// Outer steps `T` of the Euler scheme (`Δt = 1/T`).
    pub outer_steps: usize,
    /// RK4 substeps per chart move in the Euler scheme.
    pub substeps: usize,
    /// RK4 steps per unit time for hard switching and ambient integration.
    pub steps_per_unit: usize,
    /// Bisection tolerance in `t` when locating a chart switch.
    pub switch_tol: f64,
    pub max_switches: usize,
    /// Ambient integration aborts once `‖x‖` exceeds this multiple of the
    /// data radius.
    pub divergence_factor: f64,
}

impl Default for MultiExpConfig {
    fn default() -> Self {
        MultiExpConfig {
            outer_steps: 20,
            substeps: 5,
            steps_per_unit: 100,
            switch_tol: 1e-8,
            max_switches: 50,
            divergence_factor: 10.0,
        }
    }
}

impl MultiExpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 || self.substeps == 0 || self.steps_per_unit == 0 {
            return Err(Error::Config("exp-map step counts must be >= 1".into()));
        }
        if !(self.switch_tol > 0.0) || !(self.divergence_factor > 0.0) {
            return Err(Error::Config(
                "switch_tol and divergence_factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Multi-chart integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpScheme {
    Euler,
    HardSwitch,
    Ambient,
}

impl std::fmt::Display for ExpScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExpScheme::Euler => "euler",
            ExpScheme::HardSwitch => "hard_switch",
            ExpScheme::Ambient => "ambient",
        })
    }
}

/// Trajectory of a multi-chart exponential map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiTrajectory {
    pub ts: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub vs: Vec<Vec<f64>>,
    /// Hard switching: `(t, from, to)` for each chart change.
    pub switches: Vec<(f64, usize, usize)>,
    /// Euler: `(step, chart)` for charts dropped after a failed move.
    pub dropped: Vec<(usize, usize)>,
    /// Euler: the filtered weights used at each step.
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl MultiTrajectory {
    fn push(&mut self, t: f64, x: Vec<f64>, v: Vec<f64>) {
        self.ts.push(t);
        self.xs.push(x);
        self.vs.push(v);
    }

    pub fn endpoint(&self) -> Option<&[f64]> {
        self.xs.last().map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn positions(&self) -> Points {
        let d = self.xs.first().map_or(0, |x| x.len());
        let mut p = Points::with_capacity(d, self.xs.len());
        for x in &self.xs {
            p.push(x).expect("uniform dimension");
        }
        p
    }

    /// CSV with columns `t, x1..xD`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let d = self.xs.first().map_or(0, |x| x.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (t, x) in self.ts.iter().zip(&self.xs) {
            let mut row = vec![format!("{t:e}")];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Multi-chart exponential-map failure with the partial trajectory.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} samples)", partial.len())]
pub struct MultiFailure {
    pub error: Error,
    pub partial: MultiTrajectory,
}

impl From<MultiFailure> for Error {
    fn from(f: MultiFailure) -> Self {
        f.error
    }
}

impl From<Error> for MultiFailure {
    fn from(error: Error) -> Self {
        MultiFailure {
            error,
            partial: MultiTrajectory::default(),
        }
    }
}

type MultiResult = std::result::Result<MultiTrajectory, MultiFailure>;

fn fail(error: Error, partial: MultiTrajectory) -> MultiFailure {
    MultiFailure { error, partial }
}

/// Moves along chart `c`'s geodesic from `(x, v)` for time `dt`.
fn chart_move<C: Chart>(
    chart: &C,
    x: &[f64],
    v: &[f64],
    dt: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = chart.coords(x)?;
    let zd = latent_velocity(chart, &z, v)?;
    let traj = integrate_latent(
        chart,
        &z,
        &zd,
        dt,
        Integrator::Rk4 {
            steps_per_unit: ((steps as f64 / dt).round() as usize).max(1),
        },
    )?;
    let end = traj.last().expect("non-empty trajectory");
    Ok((end.x.clone(), end.v.clone()))
}

/// Euler scheme: at every step move along each active chart's geodesic for
/// `Δt` and average the results with the filtered responsibilities.
pub fn exp_map_euler(atlas: &Atlas, x0: &[f64], v0: &[f64], cfg: &MultiExpConfig) -> MultiResult {
    cfg.validate()?;
    check_dim("exp_map_euler", atlas.ambient_dim(), x0.len())?;
    check_dim("exp_map_euler", atlas.ambient_dim(), v0.len())?;
    let n = x0.len();
    let dt = 1.0 / cfg.outer_steps as f64;
    let mut traj = MultiTrajectory::default();

    // starting state: projection of x₀ and the weighted tangent projection
    // of v₀
    let moved = |x: &[f64], v: &[f64], dt: f64, traj: &mut MultiTrajectory, step: usize| {
        let mut w = active(atlas, x)?;
        let mut results = Vec::with_capacity(w.len());
        let mut keep = Vec::with_capacity(w.len());
        let mut last_err = None;
        for &(c, r) in &w {
            let res = if dt == 0.0 {
                let ch = &atlas.charts[c];
                ch.coords(x).and_then(|z| {
                    let zd = latent_velocity(ch, &z, v)?;
                    Ok(crate::autodiff::value_and_jvp(&EmbeddingOf(ch), &z, &zd)?)
                })
            } else {
                chart_move(&atlas.charts[c], x, v, dt, cfg.substeps)
            };
            match res {
                Ok(xv) => {
                    results.push(xv);
                    keep.push((c, r));
                }
                Err(e) if e.is_numerical() => {
                    traj.dropped.push((step, c));
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        if keep.is_empty() {
            return Err(last_err.unwrap_or(Error::numerical("exp_map_euler", "no chart")));
        }
        renormalize(&mut keep);
        w.clone_from(&keep);
        let mut xn = vec![0.0; n];
        let mut vn = vec![0.0; n];
        for (&(_, r), (xc, vc)) in keep.iter().zip(&results) {
            for i in 0..n {
                xn[i] += r * xc[i];
                vn[i] += r * vc[i];
            }
        }
        traj.weights.push(w);
        Ok((xn, vn))
    };

    let (mut x, mut v) = match moved(x0, v0, 0.0, &mut traj, 0) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, traj)),
    };
    traj.push(0.0, x.clone(), v.clone());
    for step in 1..=cfg.outer_steps {
        match moved(&x, &v, dt, &mut traj, step) {
            Ok((xn, vn)) => {
                x = xn;
                v = vn;
            }
            Err(e) => return Err(fail(e, traj)),
        }
        let t = if step == cfg.outer_steps {
            1.0
        } else {
            step as f64 * dt
        };
        traj.push(t, x.clone(), v.clone());
    }
    Ok(traj)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in v.iter().enumerate() {
        if a > v[best] {
            best = i;
        }
    }
    best
}

/// Hard switching: follow the most responsible chart's geodesic until
/// another chart becomes most responsible, then hand the ambient state over.
pub fn exp_map_hard_switch(
    atlas: &Atlas,
    x0: &[f64],
    v0: &[f64],
    cfg: &MultiExpConfig,
) -> MultiResult {
    cfg.validate()?;
    check_dim("exp_map_hard_switch", atlas.ambient_dim(), x0.len())?;
    check_dim("exp_map_hard_switch", atlas.ambient_dim(), v0.len())?;
    let mut traj = MultiTrajectory::default();
    let resp = |x: &[f64]| atlas.responsibility_row(x);

    let mut c = match resp(x0) {
        Ok(r) => argmax(&r),
        Err(e) => return Err(fail(e, traj)),
    };
    let enter = |c: usize, x: &[f64], v: &[f64]| -> Result<Vec<f64>> {
        let ch = &atlas.charts[c];
        let z = ch.coords(x)?;
        let zd = latent_velocity(ch, &z, v)?;
        Ok(z.into_iter().chain(zd).collect())
    };
    let mirror = |c: usize, y: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let d = atlas.latent_dim();
        Ok(crate::autodiff::value_and_jvp(
            &EmbeddingOf(&atlas.charts[c]),
            &y[..d],
            &y[d..],
        )?)
    };
    let d = atlas.latent_dim();
    let step = |c: usize, y: &[f64], h: f64| -> Result<Vec<f64>> {
        let ch = &atlas.charts[c];
        let mut rhs = |_: f64, y: &[f64]| -> Result<Vec<f64>> {
            let mut out = y[d..].to_vec();
            out.extend(crate::geo_single::geodesic_acceleration(
                ch,
                &y[..d],
                &y[d..],
            )?);
            Ok(out)
        };
        ode::rk4_step(&mut rhs, 0.0, y, h)
    };

    let mut y = match enter(c, x0, v0) {
        Ok(y) => y,
        Err(e) => return Err(fail(e, traj)),
    };
    let (x, v) = match mirror(c, &y) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, traj)),
    };
    traj.push(0.0, x, v);
    let h_nominal = 1.0 / cfg.steps_per_unit as f64;
    let mut t = 0.0;
    'outer: while t < 1.0 {
        let remaining = 1.0 - t;
        let n = ((remaining / h_nominal - 1e-9).ceil() as usize).max(1);
        let h = remaining / n as f64;
        for i in 0..n {
            let attempt = (|| -> Result<Option<(f64, Vec<f64>, usize)>> {
                let yn = step(c, &y, h)?;
                let (xn, _) = mirror(c, &yn)?;
                let rn = resp(&xn)?;
                let cn = argmax(&rn);
                if cn == c {
                    return Ok(None);
                }
                // bracket [lo, hi] with chart c still on top at lo
                let (mut lo, mut hi) = (0.0, h);
                let mut hi_chart = cn;
                while hi - lo > cfg.switch_tol {
                    let mid = 0.5 * (lo + hi);
                    let ym = step(c, &y, mid)?;
                    let (xm, _) = mirror(c, &ym)?;
                    let rm = resp(&xm)?;
                    let cm = argmax(&rm);
                    if cm == c {
                        lo = mid;
                    } else {
                        hi = mid;
                        hi_chart = cm;
                    }
                }
                Ok(Some((hi, step(c, &y, hi)?, hi_chart)))
            })();
            match attempt {
                Ok(None) => {
                    y = step(c, &y, h).expect("step just succeeded");
                    t = if i + 1 == n { 1.0 } else { t + h };
                    match mirror(c, &y) {
                        Ok((x, v)) => traj.push(t, x, v),
                        Err(e) => return Err(fail(e, traj)),
                    }
                }
                Ok(Some((s, ys, cn))) => {
                    t += s;
                    let (xs, vs) = match mirror(c, &ys) {
                        Ok(m) => m,
                        Err(e) => return Err(fail(e, traj)),
                    };
                    traj.push(t, xs.clone(), vs.clone());
                    traj.switches.push((t, c, cn));
                    if traj.switches.len() > cfg.max_switches {
                        let switches = traj.switches.len();
                        return Err(fail(Error::Thrashing { switches }, traj));
                    }
                    c = cn;
                    y = match enter(c, &xs, &vs) {
                        Ok(y) => y,
                        Err(e) => return Err(fail(e, traj)),
                    };
                    continue 'outer;
                }
                Err(e) => return Err(fail(e, traj)),
            }
        }
    }
    Ok(traj)
}

/// Ambient scheme: integrate `ẍ = Σ_c r_c(x) a_c(x, ẋ)` directly in the
/// ambient space, each chart contributing its geodesic's ambient
/// acceleration.
pub fn exp_map_ambient(atlas: &Atlas, x0: &[f64], v0: &[f64], cfg: &MultiExpConfig) -> MultiResult {
    cfg.validate()?;
    check_dim("exp_map_ambient", atlas.ambient_dim(), x0.len())?;
    check_dim("exp_map_ambient", atlas.ambient_dim(), v0.len())?;
    let n = x0.len();
    let radius = if atlas.data_radius > 0.0 {
        atlas.data_radius
    } else {
        norm(x0).max(1.0)
    };
    let limit = cfg.divergence_factor * radius;

    // projected start, as in the Euler scheme
    let mut xs = vec![0.0; n];
    let mut vs = vec![0.0; n];
    for (c, r) in active(atlas, x0)? {
        let ch = &atlas.charts[c];
        let z = ch.coords(x0)?;
        let zd = latent_velocity(ch, &z, v0)?;
        let (xc, vc) =
            crate::autodiff::value_and_jvp(&EmbeddingOf(ch), &z, &zd).map_err(Error::from)?;
        for i in 0..n {
            xs[i] += r * xc[i];
            vs[i] += r * vc[i];
        }
    }

    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let (x, v) = y.split_at(n);
        let nx = norm(x);
        if !(nx <= limit) {
            return Err(Error::Diverged { t, norm: nx });
        }
        let mut parts = Vec::new();
        let mut last_err = None;
        for (c, r) in active(atlas, x)? {
            let ch = &atlas.charts[c];
            let acc = ch.coords(x).and_then(|z| {
                let zd = latent_velocity(ch, &z, v)?;
                crate::geo_single::ambient_acceleration(ch, &z, &zd)
            });
            match acc {
                Ok(a) => parts.push((r, a)),
                Err(e) if e.is_numerical() => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        if parts.is_empty() {
            return Err(last_err.unwrap_or(Error::numerical("exp_map_ambient", "no chart")));
        }
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let mut out = v.to_vec();
        out.resize(2 * n, 0.0);
        for (r, a) in parts {
            for i in 0..n {
                out[n + i] += r / total * a[i];
            }
        }
        Ok(out)
    };
    let y0: Vec<f64> = xs.iter().chain(&vs).copied().collect();
    let to_traj = |samples: ode::Samples| {
        let mut tr = MultiTrajectory::default();
        for (t, y) in samples {
            tr.push(t, y[..n].to_vec(), y[n..].to_vec());
        }
        tr
    };
    match ode::rk4(rhs, 0.0, &y0, 1.0, cfg.steps_per_unit) {
        Ok(s) => {
            let tr = to_traj(s);
            let end = tr.endpoint().map(norm).unwrap_or(0.0);
            if !(end <= limit) {
                return Err(fail(Error::Diverged { t: 1.0, norm: end }, tr));
            }
            Ok(tr)
        }
        Err(p) => Err(fail(p.error, to_traj(p.samples))),
    }
}

/// Runs the chosen multi-chart exponential map.
pub fn exp_map_multi(
    atlas: &Atlas,
    scheme: ExpScheme,
    x0: &[f64],
    v0: &[f64],
    cfg: &MultiExpConfig,
) -> MultiResult {
    match scheme {
        ExpScheme::Euler => exp_map_euler(atlas, x0, v0, cfg),
        ExpScheme::HardSwitch => exp_map_hard_switch(atlas, x0, v0, cfg),
        ExpScheme::Ambient => exp_map_ambient(atlas, x0, v0, cfg),
    }
}

/// Orthogonal projection of `w` onto the span of the leading `d` left
/// singular vectors of the column-major `D×D` projection Jacobian.
fn tangent_component(jac: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let dim = w.len();
    let svd = DMatrix::from_column_slice(dim, dim, jac).svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = vec![0.0; dim];
    for &k in order.iter().take(d) {
        let col = u.column(k);
        let c: f64 = col.iter().zip(w).map(|(a, b)| a * b).sum();
        for (o, a) in out.iter_mut().zip(col.iter()) {
            *o += c * a;
        }
    }
    out
}

/// Spline through a path that walks along the learned surface from `x0`
/// towards `x1`: each step moves a fixed distance along the tangent
/// component of `x1 − x` and is projected back. Fails if the walk
/// stalls or does not arrive within the step budget.
fn surface_march(atlas: &Atlas, x0: &[f64], x1: &[f64], cfg: &LogMapConfig) -> Result<SplineCurve> {
    let chord = dist2(x0, x1).sqrt();
    let mut curve = SplineCurve::chord(x0, x1, cfg.controls, cfg.samples)?;
    if chord == 0.0 || cfg.controls == 0 {
        return Ok(curve);
    }
    let h = chord / cfg.samples as f64;
    let mut path = vec![x0.to_vec()];
    let (mut x, mut jac) = projection_jacobian(atlas, x0)?;
    let stalled = || Error::numerical("surface_march", "walk did not reach the endpoint");
    for _ in 0..8 * cfg.samples {
        let w: Vec<f64> = x1.iter().zip(&x).map(|(a, b)| a - b).collect();
        if norm(&w) <= h {
            break;
        }
        let u = tangent_component(&jac, &w, atlas.latent_dim());
        let nu = norm(&u);
        if !(nu > 1e-3 * norm(&w)) {
            return Err(stalled());
        }
        let step: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h / nu * b).collect();
        (x, jac) = projection_jacobian(atlas, &step)?;
        path.push(x.clone());
    }
    if dist2(&x, x1).sqrt() > h {
        return Err(stalled());
    }
    path.push(x1.to_vec());
    curve.fit(&resample_by_length(&path, cfg.samples))?;
    Ok(curve)
}

/// `segments + 1` points equally spaced in arc length along a polyline.
fn resample_by_length(path: &[Vec<f64>], segments: usize) -> Points {
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + dist2(&w[0], &w[1]).sqrt());
    }
    let total = *cum.last().unwrap();
    let mut out = Points::with_capacity(path[0].len(), segments + 1);
    let mut k = 0;
    for j in 0..=segments {
        let s = total * j as f64 / segments as f64;
        while k + 2 < cum.len() && cum[k + 1] < s {
            k += 1;
        }
        let span = cum[k + 1] - cum[k];
        let a = if span > 0.0 {
            ((s - cum[k]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let row: Vec<f64> = path[k]
            .iter()
            .zip(&path[k + 1])
            .map(|(p, q)| p + a * (q - p))
            .collect();
        out.push(&row).expect("dimension fixed");
    }
    out
}

/// Geodesic between two points near the learned manifold. The spline lives
/// in ambient space; its samples are projected onto the manifold and the
/// energy of the projected curve is minimized. A final least-squares spline
/// through the projected samples gives the initial velocity.
pub fn log_map_multi(atlas: &Atlas, x0: &[f64], x1: &[f64], cfg: &LogMapConfig) -> Result<LogMap> {
    check_dim("log_map_multi", atlas.ambient_dim(), x0.len())?;
    check_dim("log_map_multi", atlas.ambient_dim(), x1.len())?;
    let march = surface_march(atlas, x0, x1, cfg).ok();
    let mut r = optimize_curve(
        &|x: &[f64]| projection_jacobian(atlas, x),
        x0,
        x1,
        cfg,
        march,
    )?;
    let last = r.projected.len() - 1;
    let mut refit = SplineCurve::chord(
        r.projected.row(0),
        r.projected.row(last),
        cfg.controls,
        cfg.samples,
    )?;
    refit.fit(&r.projected)?;
    r.v0 = refit.initial_velocity();
    r.curve = refit;
    Ok(r)
}

/// Active charts at each point.
pub fn active_chart_trace(atlas: &Atlas, points: &Points) -> Result<Vec<Vec<usize>>> {
    points
        .rows()
        .map(|x| Ok(active(atlas, x)?.into_iter().map(|a| a.0).collect()))
        .collect()
}

/// Per-pair record of a distance-matrix computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDiagnostic {
    pub i: usize,
    pub j: usize,
    pub length: f64,
    pub converged: bool,
    /// The geodesic solve failed and `length` is the projected chord.
    pub fallback: bool,
    /// Number of curve samples at which each chart was active.
    pub active_chart_histogram: Vec<usize>,
}

/// Symmetric matrix of geodesic distances with per-entry convergence flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    data: Vec<f64>,
    converged: Vec<bool>,
    pub diagnostics: Vec<PairDiagnostic>,
}

impl DistanceMatrix {
    /// Builds a matrix from a dense symmetric array (all entries flagged
    /// converged).
    pub fn from_dense(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Dimension {
                op: "DistanceMatrix::from_dense",
                expected: n * n,
                got: data.len(),
            });
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::Validation(
                    "distance matrix diagonal must be 0".into(),
                ));
            }
            for j in 0..i {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if a != b || !(a >= 0.0) {
                    return Err(Error::Validation(format!(
                        "distance matrix must be symmetric and nonnegative at ({i},{j})"
                    )));
                }
            }
        }
        Ok(DistanceMatrix {
            n,
            data,
            converged: vec![true; n * n],
            diagnostics: Vec::new(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn converged(&self, i: usize, j: usize) -> bool {
        self.converged[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `n` on the first line, then `n` comma-separated rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.n)?;
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|j| format!("{:e}", self.get(i, j)))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads the format of [`DistanceMatrix::write_csv`]; lines starting
    /// with `#` are comments.
    pub fn read_csv<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut lines = r
            .lines()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Ok(l) if l.trim_start().starts_with('#')));
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty distance matrix file".into(),
        })?;
        let n: usize = first?.trim().parse().map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad size: {e}"),
        })?;
        let mut data = Vec::with_capacity(n * n);
        for (ln, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: ln + 1,
                    msg: e.to_string(),
                })?;
            if row.len() != n {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected {n} entries, found {}", row.len()),
                });
            }
            data.extend(row);
        }
        if data.len() != n * n {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected {n} rows"),
            });
        }
        DistanceMatrix::from_dense(n, data)
    }

    /// `i, j, length, converged, fallback, hist_0..hist_{C-1}`.
    pub fn write_diagnostics_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let c = self
            .diagnostics
            .first()
            .map_or(0, |d| d.active_chart_histogram.len());
        let mut header: Vec<String> = ["i", "j", "length", "converged", "fallback"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..c).map(|k| format!("active_{k}")));
        writeln!(w, "{}", header.join(","))?;
        for d in &self.diagnostics {
            let mut row = vec![
                d.i.to_string(),
                d.j.to_string(),
                format!("{:e}", d.length),
                d.converged.to_string(),
                d.fallback.to_string(),
            ];
            row.extend(d.active_chart_histogram.iter().map(|h| h.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Unordered pairs `(i, j)` with `i > j`, row by row.
pub fn tril_pairs(n: usize) -> Vec<(usize, usize)> {
    (1..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
}

fn projected_chord_length(atlas: &Atlas, x0: &[f64], x1: &[f64], samples: usize) -> Option<f64> {
    let chord = SplineCurve::chord(x0, x1, 0, samples).ok()?.samples();
    let mut pts = Points::new(x0.len());
    for p in chord.rows() {
        pts.push(&project_to_manifold(atlas, p).ok()?.x_proj).ok()?;
    }
    Some(crate::geo_single::curve_length(&pts))
}

fn solve_pair(
    atlas: &Atlas,
    points: &Points,
    i: usize,
    j: usize,
    cfg: &LogMapConfig,
) -> PairDiagnostic {
    let (a, b) = (points.row(i), points.row(j));
    let mut hist = vec![0; atlas.n_charts()];
    if dist2(a, b) == 0.0 {
        return PairDiagnostic {
            i,
            j,
            length: 0.0,
            converged: true,
            fallback: false,
            active_chart_histogram: hist,
        };
    }
    match log_map_multi(atlas, a, b, cfg) {
        Ok(r) => {
            if let Ok(trace) = active_chart_trace(atlas, &r.projected) {
                for cs in trace {
                    for c in cs {
                        hist[c] += 1;
                    }
                }
            }
            PairDiagnostic {
                i,
                j,
                length: r.length,
                converged: r.converged,
                fallback: false,
                active_chart_histogram: hist,
            }
        }
        Err(_) => PairDiagnostic {
            i,
            j,
            length: projected_chord_length(atlas, a, b, cfg.samples)
                .unwrap_or_else(|| dist2(a, b).sqrt()),
            converged: false,
            fallback: true,
            active_chart_histogram: hist,
        },
    }
}

/// Geodesic distances between all pairs of `points`, one solve per
/// unordered pair. Pairs run in parallel; results are merged in index
/// order.
pub fn distance_matrix(
    atlas: &Atlas,
    points: &Points,
    cfg: &LogMapConfig,
) -> Result<DistanceMatrix> {
    check_dim("distance_matrix", atlas.ambient_dim(), points.dim())?;
    cfg.validate()?;
    let n = points.len();
    if n < 2 {
        return Err(Error::Validation(
            "distance matrix needs at least 2 points".into(),
        ));
    }
    let pairs = tril_pairs(n);
    let diagnostics: Vec<PairDiagnostic> = pairs
        .par_iter()
        .map(|&(i, j)| solve_pair(atlas, points, i, j, cfg))
        .collect();
    let mut data = vec![0.0; n * n];
    let mut converged = vec![true; n * n];
    for d in &diagnostics {
        for (a, b) in [(d.i, d.j), (d.j, d.i)] {
            data[a * n + b] = d.length;
            converged[a * n + b] = d.converged;
        }
    }
    Ok(DistanceMatrix {
        n,
        data,
        converged,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{ChartFlow, FlowConfig};
    use crate::geo_single::{exp_map, ExpMapOptions};

    fn flow(seed: u64, scale: f64) -> ChartFlow {
        let cfg = FlowConfig {
            latent_dim: 2,
            ambient_dim: 3,
            g_layers: 2,
            h_layers: 3,
            hidden: 6,
            s_max: 2.0,
        };
        let mut f = ChartFlow::new(cfg, seed).unwrap();
        f.randomize(scale, seed + 50);
        f
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_chart_projection_is_reconstruction() {
        let f = flow(1, 0.2);
        let atlas = Atlas::from_charts(vec![f.clone()]).unwrap();
        let x = [0.3, -0.2, 0.4];
        let p = project_to_manifold(&atlas, &x).unwrap();
        assert_eq!(p.resp, vec![1.0]);
        assert!(close(&p.x_proj, &f.reconstruct(&x).unwrap().0, 1e-14));
    }

    #[test]
    fn agreeing_charts_project_surface_points_to_themselves() {
        let f = flow(2, 0.2);
        let atlas = Atlas::from_charts(vec![f.clone(), f.clone()]).unwrap();
        let x = f.h_tilde(&[0.2, 0.1]).unwrap();
        let p = project_to_manifold(&atlas, &x).unwrap();
        assert!(close(&p.x_proj, &x, 1e-12));
        assert!((p.resp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impossible_threshold_is_a_config_error() {
        let f = flow(3, 0.2);
        let mut atlas = Atlas::from_charts(vec![f.clone(), f]).unwrap();
        atlas.resp_threshold = 0.9;
        let e = project_to_manifold(&atlas, &[0.1, 0.2, 0.3]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn single_chart_euler_matches_exp_map() {
        let f = flow(4, 0.25);
        let atlas = Atlas::from_charts(vec![f.clone()]).unwrap();
        let x0 = f.h_tilde(&[0.1, -0.3]).unwrap();
        let v0 = [0.4, -0.2, 0.3];
        let single = exp_map(&f, &x0, &v0, 1.0, &ExpMapOptions::default()).unwrap();
        let cfg = MultiExpConfig::default();
        let euler = exp_map_euler(&atlas, &x0, &v0, &cfg).unwrap();
        let end = single.last().unwrap().x.clone();
        assert!(dist2(euler.endpoint().unwrap(), &end).sqrt() < 1e-6);
        assert_eq!(euler.len(), 21);
        for w in &euler.weights {
            assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let hard = exp_map_hard_switch(&atlas, &x0, &v0, &cfg).unwrap();
        assert!(dist2(hard.endpoint().unwrap(), &end).sqrt() < 1e-10);
        assert!(hard.switches.is_empty());
        let amb = exp_map_ambient(&atlas, &x0, &v0, &cfg).unwrap();
        assert!(dist2(amb.endpoint().unwrap(), &end).sqrt() < 1e-4);
    }

    #[test]
    fn zero_velocity_stays_at_the_projection() {
        let f = flow(5, 0.2);
        let g = flow(6, 0.2);
        let atlas = Atlas::from_charts(vec![f, g]).unwrap();
        let x0 = [0.2, 0.1, -0.1];
        let p = project_to_manifold(&atlas, &x0).unwrap();
        let t = exp_map_euler(&atlas, &x0, &[0.0; 3], &MultiExpConfig::default()).unwrap();
        for x in &t.xs {
            assert!(close(x, &p.x_proj, 1e-9), "{x:?} vs {:?}", p.x_proj);
        }
    }

    #[test]
    fn linear_single_chart_ambient_motion_is_straight() {
        // an identity-initialized flow is the linear embedding z ↦ (z, 0)
        let f = ChartFlow::new(FlowConfig::default(), 7).unwrap();
        let atlas = Atlas::from_charts(vec![f]).unwrap();
        let t = exp_map_ambient(
            &atlas,
            &[0.1, 0.2, 0.0],
            &[0.5, -0.3, 0.0],
            &MultiExpConfig::default(),
        )
        .unwrap();
        assert!(close(t.endpoint().unwrap(), &[0.6, -0.1, 0.0], 1e-12));
    }

    #[test]
    fn ambient_divergence_is_flagged() {
        let f = ChartFlow::new(FlowConfig::default(), 8).unwrap();
        let mut atlas = Atlas::from_charts(vec![f]).unwrap();
        atlas.data_radius = 0.1;
        let e = exp_map_ambient(
            &atlas,
            &[0.0, 0.0, 0.0],
            &[5.0, 0.0, 0.0],
            &MultiExpConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(e.error, Error::Diverged { .. }));
        assert!(!e.partial.is_empty());
    }

    /// Two identity flows on the plane `x₃ = 0` whose latent densities are
    /// shifted to opposite sides of `x₂ = 0` (through the output bias of g's
    /// shift network), so the most responsible chart changes at `x₂ = 0`
    /// while both charts describe the same surface with the same metric.
    fn half_plane_atlas(shift: f64) -> Atlas {
        let cfg = FlowConfig {
            latent_dim: 2,
            ambient_dim: 3,
            g_layers: 1,
            h_layers: 2,
            hidden: 4,
            s_max: 2.0,
        };
        let charts = [shift, -shift]
            .iter()
            .map(|&b| {
                let mut f = ChartFlow::new(cfg.clone(), 9).unwrap();
                let idx = f.layout.g[0].shift.end() - 1;
                f.params[idx] = b;
                f
            })
            .collect();
        Atlas::from_charts(charts).unwrap()
    }

    #[test]
    fn hard_switch_with_identical_charts_never_switches() {
        let atlas = half_plane_atlas(0.0);
        let cfg = MultiExpConfig::default();
        let t = exp_map_hard_switch(&atlas, &[-0.5, 0.1, 0.0], &[1.0, 0.0, 0.0], &cfg).unwrap();
        assert!(t.switches.is_empty());
        assert!(close(t.endpoint().unwrap(), &[0.5, 0.1, 0.0], 1e-12));
    }

    #[test]
    fn hard_switch_is_continuous_across_a_boundary() {
        let atlas = half_plane_atlas(0.5);
        let cfg = MultiExpConfig::default();
        let t = exp_map_hard_switch(&atlas, &[0.1, -0.5, 0.0], &[0.0, 1.0, 0.0], &cfg).unwrap();
        assert_eq!(t.switches.len(), 1);
        let (ts, from, to) = t.switches[0];
        assert_eq!((from, to), (1, 0));
        assert!((ts - 0.5).abs() < 1e-7, "{ts}");
        for w in t.xs.windows(2) {
            assert!(dist2(&w[0], &w[1]).sqrt() <= 0.01 + 1e-6);
        }
        assert!(close(t.endpoint().unwrap(), &[0.1, 0.5, 0.0], 1e-6));
        let e = exp_map_euler(&atlas, &[0.1, -0.5, 0.0], &[0.0, 1.0, 0.0], &cfg).unwrap();
        assert!(close(e.endpoint().unwrap(), &[0.1, 0.5, 0.0], 1e-6));
    }

    #[test]
    fn distance_matrix_basics() {
        let f = ChartFlow::new(FlowConfig::default(), 10).unwrap();
        let atlas = Atlas::from_charts(vec![f]).unwrap();
        let pts = Points::from_rows(3, &[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let m = distance_matrix(&atlas, &pts, &LogMapConfig::default()).unwrap();
        assert_eq!(m.as_slice(), &[0.0; 4]);
        let pts =
            Points::from_rows(3, &[[0.0, 0.0, 0.0], [0.3, 0.4, 0.0], [1.0, 0.0, 0.5]]).unwrap();
        let cfg = LogMapConfig {
            optimizer: crate::geo_single::CurveOptimizer::GaussNewton,
            ..Default::default()
        };
        let m = distance_matrix(&atlas, &pts, &cfg).unwrap();
        assert!((m.get(1, 0) - 0.5).abs() < 1e-9);
        assert!((m.get(2, 0) - 1.0).abs() < 1e-9);
        assert_eq!(m.get(0, 2), m.get(2, 0));
        assert_eq!(m.diagnostics.len(), 3);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = DistanceMatrix::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.as_slice(), m.as_slice());
    }

    #[test]
    fn tril_pairs_order() {
        assert_eq!(tril_pairs(3), vec![(1, 0), (2, 0), (2, 1)]);
        assert_eq!(tril_pairs(100).len(), 4950);
    }
}
