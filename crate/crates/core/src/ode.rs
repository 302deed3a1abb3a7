//! Explicit Runge–Kutta integrators for `y' = f(t, y)`.

use crate::error::{Error, Result};

/// Integrator choice for geodesic initial value problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrator {
    /// Classical RK4 with a fixed number of steps per unit time.
    Rk4 { steps_per_unit: usize },
    /// Dormand–Prince 5(4) with relative tolerance `rtol`.
    Rk45 { rtol: f64 },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Rk4 {
            steps_per_unit: 100,
        }
    }
}

fn axpy_into(out: &mut [f64], y: &[f64], h: f64, k: &[f64]) {
    for ((o, a), b) in out.iter_mut().zip(y).zip(k) {
        *o = a + h * b;
    }
}

/// One classical RK4 step.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y.len();
    let mut tmp = vec![0.0; n];
    let k1 = f(t, y)?;
    axpy_into(&mut tmp, y, 0.5 * h, &k1);
    let k2 = f(t + 0.5 * h, &tmp)?;
    axpy_into(&mut tmp, y, 0.5 * h, &k2);
    let k3 = f(t + 0.5 * h, &tmp)?;
    axpy_into(&mut tmp, y, h, &k3);
    let k4 = f(t + h, &tmp)?;
    Ok((0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Solution samples `(t, y)`, starting with the initial condition.
pub type Samples = Vec<(f64, Vec<f64>)>;

/// Failure during integration together with the samples computed so far.
#[derive(Debug)]
pub struct PartialSolution {
    pub samples: Samples,
    pub error: Error,
}

/// Fixed-step RK4 from `t0` to `t1` in `steps` steps.
pub fn rk4<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    steps: usize,
) -> std::result::Result<Samples, PartialSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let steps = steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    out.push((t0, y0.to_vec()));
    let mut y = y0.to_vec();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        match rk4_step(&mut f, t, &y, h) {
            Ok(next) => y = next,
            Err(error) => {
                return Err(PartialSolution {
                    samples: out,
                    error,
                })
            }
        }
        let t_next = if i + 1 == steps { t1 } else { t + h };
        out.push((t_next, y.clone()));
    }
    Ok(out)
}

// Dormand–Prince coefficients
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MAX_STEPS: usize = 100_000;

/// Adaptive Dormand–Prince 5(4) from `t0` to `t1` (requires `t1 > t0`).
pub fn rk45<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    rtol: f64,
    atol: f64,
) -> std::result::Result<Samples, PartialSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y0.len();
    let mut out = vec![(t0, y0.to_vec())];
    if t1 <= t0 {
        return Ok(out);
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h = (t1 - t0) / 100.0;
    let mut steps = 0;
    while t < t1 {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(PartialSolution {
                samples: out,
                error: Error::numerical("rk45", "step budget exhausted"),
            });
        }
        h = h.min(t1 - t);
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(7);
        let mut tmp = vec![0.0; n];
        for s in 0..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in ks.iter().enumerate() {
                    acc += h * A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            match f(t + C[s] * h, &tmp) {
                Ok(k) => ks.push(k),
                Err(error) => {
                    return Err(PartialSolution {
                        samples: out,
                        error,
                    })
                }
            }
        }
        let mut err = 0.0f64;
        let mut y5 = vec![0.0; n];
        for i in 0..n {
            let mut a5 = y[i];
            let mut a4 = y[i];
            for s in 0..7 {
                a5 += h * B5[s] * ks[s][i];
                a4 += h * B4[s] * ks[s][i];
            }
            y5[i] = a5;
            let sc = atol + rtol * y[i].abs().max(a5.abs());
            err = err.max(((a5 - a4) / sc).abs());
        }
        if !err.is_finite() {
            return Err(PartialSolution {
                samples: out,
                error: Error::numerical("rk45", "non-finite error estimate"),
            });
        }
        if err <= 1.0 {
            t = if t1 - t <= h { t1 } else { t + h };
            y = y5;
            out.push((t, y.clone()));
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h < 1e-14 * (t1 - t0) {
            return Err(PartialSolution {
                samples: out,
                error: Error::numerical("rk45", "step size underflow"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oscillator(_: f64, y: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![y[1], -y[0]])
    }

    #[test]
    fn rk4_harmonic_oscillator() {
        let s = rk4(oscillator, 0.0, &[1.0, 0.0], std::f64::consts::PI, 1000).unwrap();
        let (t, y) = s.last().unwrap();
        assert_eq!(*t, std::f64::consts::PI);
        assert!((y[0] + 1.0).abs() < 1e-10 && y[1].abs() < 1e-10);
        assert_eq!(s.len(), 1001);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |n| {
            let s = rk4(oscillator, 0.0, &[1.0, 0.0], 1.0, n).unwrap();
            (s.last().unwrap().1[0] - 1f64.cos()).abs()
        };
        let ratio = err(10) / err(20);
        assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn rk45_meets_tolerance() {
        let s = rk45(oscillator, 0.0, &[1.0, 0.0], 2.0, 1e-9, 1e-12).unwrap();
        let (t, y) = s.last().unwrap();
        assert_eq!(*t, 2.0);
        assert!((y[0] - 2f64.cos()).abs() < 1e-7);
        assert!((y[1] + 2f64.sin()).abs() < 1e-7);
    }

    #[test]
    fn failures_keep_partial_samples() {
        let f = |t: f64, y: &[f64]| {
            if t > 0.5 {
                Err(Error::numerical("test", "boom"))
            } else {
                Ok(vec![y[0]])
            }
        };
        let p = rk4(f, 0.0, &[1.0], 1.0, 10).unwrap_err();
        assert_eq!(p.samples.len(), 6);
        assert!((p.samples.last().unwrap().0 - 0.5).abs() < 1e-12);
    }
}
