//! Natural cubic splines on uniform knots in `[0, 1]`, used to parameterize
//! curves between fixed endpoints.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::points::Points;

/// Weights expressing spline values (and the initial derivative) at fixed
/// sample times as linear combinations of the knot values.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    /// Interior control count `K`; knots are `t_k = k/(K+1)`, `k = 0..=K+1`.
    pub controls: usize,
    /// Segments `T`; samples are `t_j = j/T`, `j = 0..=T`.
    pub segments: usize,
    /// Row-major `(T+1) × (K+2)`.
    weights: Vec<f64>,
    /// Weights of `γ'(0)`.
    d0: Vec<f64>,
}

/// Second derivatives of the natural spline through `y` on knots spaced `h`.
fn second_derivatives(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // tridiagonal system (1, 4, 1) for the interior, Thomas algorithm
    let k = n - 2;
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    for i in 0..k {
        let rhs = 6.0 / (h * h) * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
        if i == 0 {
            c[i] = 1.0 / 4.0;
            d[i] = rhs / 4.0;
        } else {
            let den = 4.0 - c[i - 1];
            c[i] = 1.0 / den;
            d[i] = (rhs - d[i - 1]) / den;
        }
    }
    for i in (0..k).rev() {
        let next = if i + 1 < k { m[i + 2] } else { 0.0 };
        m[i + 1] = d[i] - c[i] * next;
    }
    m
}

fn eval_scalar(y: &[f64], m: &[f64], h: f64, t: f64) -> (f64, f64) {
    let segs = y.len() - 1;
    let k = ((t / h).floor() as usize).min(segs - 1);
    let (a, b) = (k as f64 * h, (k + 1) as f64 * h);
    let (l, r) = (b - t, t - a);
    let v = m[k] * l.powi(3) / (6.0 * h)
        + m[k + 1] * r.powi(3) / (6.0 * h)
        + (y[k] - m[k] * h * h / 6.0) * l / h
        + (y[k + 1] - m[k + 1] * h * h / 6.0) * r / h;
    let dv = -m[k] * l * l / (2.0 * h) + m[k + 1] * r * r / (2.0 * h) + (y[k + 1] - y[k]) / h
        - (m[k + 1] - m[k]) * h / 6.0;
    (v, dv)
}

impl SplineBasis {
    pub fn new(controls: usize, segments: usize) -> Self {
        let n = controls + 2;
        let h = 1.0 / (controls + 1) as f64;
        let segments = segments.max(1);
        let mut weights = vec![0.0; (segments + 1) * n];
        let mut d0 = vec![0.0; n];
        for col in 0..n {
            let mut y = vec![0.0; n];
            y[col] = 1.0;
            let m = second_derivatives(&y, h);
            for j in 0..=segments {
                let t = j as f64 / segments as f64;
                weights[j * n + col] = eval_scalar(&y, &m, h, t).0;
            }
            d0[col] = eval_scalar(&y, &m, h, 0.0).1;
        }
        // the endpoints interpolate exactly
        for col in 0..n {
            weights[col] = if col == 0 { 1.0 } else { 0.0 };
            weights[segments * n + col] = if col == n - 1 { 1.0 } else { 0.0 };
        }
        SplineBasis {
            controls,
            segments,
            weights,
            d0,
        }
    }

    pub fn n_knots(&self) -> usize {
        self.controls + 2
    }

    pub fn weight(&self, sample: usize, knot: usize) -> f64 {
        self.weights[sample * self.n_knots() + knot]
    }

    pub fn initial_derivative_weights(&self) -> &[f64] {
        &self.d0
    }
}

/// Natural cubic spline between fixed endpoints with `K` free interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCurve {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    /// `K` interior knot values, row-major `K × D`.
    pub controls: Vec<f64>,
    pub basis: SplineBasis,
}

impl SplineCurve {
    /// Straight chord between the endpoints.
    pub fn chord(x0: &[f64], x1: &[f64], controls: usize, segments: usize) -> Result<Self> {
        if x0.len() != x1.len() {
            return Err(Error::Dimension {
                op: "SplineCurve::chord",
                expected: x0.len(),
                got: x1.len(),
            });
        }
        let dim = x0.len();
        let mut c = Vec::with_capacity(controls * dim);
        for k in 1..=controls {
            let s = k as f64 / (controls + 1) as f64;
            c.extend(x0.iter().zip(x1).map(|(a, b)| a + s * (b - a)));
        }
        Ok(SplineCurve {
            x0: x0.to_vec(),
            x1: x1.to_vec(),
            controls: c,
            basis: SplineBasis::new(controls, segments),
        })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    fn knot(&self, k: usize) -> &[f64] {
        let d = self.dim();
        if k == 0 {
            &self.x0
        } else if k == self.basis.controls + 1 {
            &self.x1
        } else {
            &self.controls[(k - 1) * d..k * d]
        }
    }

    /// Values at `t_j = j/T`, `j = 0..=T`.
    pub fn samples(&self) -> Points {
        let d = self.dim();
        let n = self.basis.n_knots();
        let mut out = Points::with_capacity(d, self.basis.segments + 1);
        let mut row = vec![0.0; d];
        for j in 0..=self.basis.segments {
            row.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..n {
                let w = self.basis.weight(j, k);
                if w != 0.0 {
                    for (r, v) in row.iter_mut().zip(self.knot(k)) {
                        *r += w * v;
                    }
                }
            }
            out.push(&row).expect("dimension fixed");
        }
        out
    }

    /// `γ'(0)`.
    pub fn initial_velocity(&self) -> Vec<f64> {
        let d = self.dim();
        let mut v = vec![0.0; d];
        for (k, &w) in self.basis.initial_derivative_weights().iter().enumerate() {
            for (a, b) in v.iter_mut().zip(self.knot(k)) {
                *a += w * b;
            }
        }
        v
    }

    /// Least-squares refit of the interior knots to `points` sampled at
    /// `t_j = j/T` (endpoints stay fixed).
    pub fn fit(&mut self, points: &Points) -> Result<()> {
        let t1 = self.basis.segments + 1;
        let kc = self.basis.controls;
        let d = self.dim();
        if points.len() != t1 || points.dim() != d {
            return Err(Error::Dimension {
                op: "SplineCurve::fit",
                expected: t1,
                got: points.len(),
            });
        }
        if kc == 0 {
            return Ok(());
        }
        let w = DMatrix::from_fn(t1, kc, |j, k| self.basis.weight(j, k + 1));
        let normal = w.transpose() * &w;
        let chol = normal.cholesky().ok_or(Error::numerical(
            "SplineCurve::fit",
            "singular normal equations",
        ))?;
        let last = kc + 1;
        for dim in 0..d {
            let rhs = DVector::from_fn(t1, |j, _| {
                points.row(j)[dim]
                    - self.basis.weight(j, 0) * self.x0[dim]
                    - self.basis.weight(j, last) * self.x1[dim]
            });
            let sol = chol.solve(&(w.transpose() * rhs));
            for k in 0..kc {
                self.controls[k * d + dim] = sol[k];
            }
        }
        Ok(())
    }
}

/// Discrete Dirichlet energy `T·Σ‖x_{t+1} − x_t‖²` with `T` segments.
pub fn curve_energy(points: &Points) -> f64 {
    let t = points.len().saturating_sub(1);
    if t == 0 {
        return 0.0;
    }
    let mut e = 0.0;
    for j in 0..t {
        e += crate::points::dist2(points.row(j + 1), points.row(j));
    }
    t as f64 * e
}

/// Discretized length `Σ‖x_{t+1} − x_t‖`.
pub fn curve_length(points: &Points) -> f64 {
    (1..points.len())
        .map(|j| crate::points::dist2(points.row(j), points.row(j - 1)).sqrt())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact_for_any_controls() {
        let mut c = SplineCurve::chord(&[0.1, 0.2], &[1.3, -0.7], 5, 17).unwrap();
        for (i, v) in c.controls.iter_mut().enumerate() {
            *v = (i as f64).sin() * 3.0;
        }
        let s = c.samples();
        assert_eq!(s.row(0), &[0.1, 0.2]);
        assert_eq!(s.row(17), &[1.3, -0.7]);
    }

    #[test]
    fn chord_is_a_straight_unit_speed_line() {
        let c = SplineCurve::chord(&[0.0, 0.0], &[2.0, 1.0], 8, 64).unwrap();
        let s = c.samples();
        for j in 0..=64 {
            let t = j as f64 / 64.0;
            assert!((s.row(j)[0] - 2.0 * t).abs() < 1e-12);
            assert!((s.row(j)[1] - t).abs() < 1e-12);
        }
        let v = c.initial_velocity();
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_knots_and_has_natural_ends() {
        // natural spline through y = t³ samples: compare against a direct
        // dense solve of the defining conditions
        let k = 3;
        let h = 0.25;
        let y: Vec<f64> = (0..5).map(|i| ((i as f64) * h).powi(3)).collect();
        let m = second_derivatives(&y, h);
        assert_eq!(m[0], 0.0);
        assert_eq!(m[4], 0.0);
        let a = DMatrix::from_row_slice(k, k, &[4.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 4.0]);
        let rhs = DVector::from_fn(k, |i, _| 6.0 / (h * h) * (y[i + 2] - 2.0 * y[i + 1] + y[i]));
        let direct = a.lu().solve(&rhs).unwrap();
        for i in 0..k {
            assert!((m[i + 1] - direct[i]).abs() < 1e-12);
        }
        for (i, &yi) in y.iter().enumerate() {
            assert!((eval_scalar(&y, &m, h, i as f64 * h).0 - yi).abs() < 1e-14);
        }
    }

    #[test]
    fn energies() {
        let c = Points::from_rows(2, &[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(curve_energy(&c), 0.0);
        let t = 10;
        let line = Points::from_rows(
            2,
            &(0..=t)
                .map(|j| [3.0 * j as f64 / t as f64, 4.0 * j as f64 / t as f64])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((curve_energy(&line) - 25.0).abs() < 1e-12);
        assert!((curve_length(&line) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn semicircle_energy_ratio() {
        let t = 100;
        let arc = Points::from_rows(
            2,
            &(0..=t)
                .map(|j| {
                    let a = std::f64::consts::PI * j as f64 / t as f64;
                    [a.cos(), a.sin()]
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let chord = Points::from_rows(
            2,
            &(0..=t)
                .map(|j| [1.0 - 2.0 * j as f64 / t as f64, 0.0])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let ratio = curve_energy(&arc) / curve_energy(&chord);
        let limit = std::f64::consts::FRAC_PI_2.powi(2);
        assert!((ratio - limit).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn refit_recovers_spline_samples() {
        let mut c = SplineCurve::chord(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 4, 40).unwrap();
        for (i, v) in c.controls.iter_mut().enumerate() {
            *v += 0.1 * ((i * 7 % 5) as f64 - 2.0);
        }
        let target = c.samples();
        let mut fresh = SplineCurve::chord(&c.x0, &c.x1, 4, 40).unwrap();
        fresh.fit(&target).unwrap();
        for (a, b) in fresh.controls.iter().zip(&c.controls) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
