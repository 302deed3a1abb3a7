//! Mixture of chart flows with a fixed uniform prior over charts.

mod kmeans;
mod train;

pub use kmeans::kmeans_init;
pub(crate) use train::projection_recon;
pub use train::{train, History, HistoryRow, TrainConfig, TrainError, TrainMode, Trained};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flows::{ChartFlow, FlowConfig};
use crate::points::Points;

/// The learned manifold: `C` charts sharing `(d, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub charts: Vec<ChartFlow>,
    pub resp_threshold: f64,
    pub lambda_recon: f64,
    pub lambda_balance: f64,
    /// Largest training-data norm; used to detect diverging trajectories.
    pub data_radius: f64,
}

/// Row-stochastic `n×C` responsibility matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub n_charts: usize,
    pub data: Vec<f64>,
}

impl Responsibilities {
    pub fn len(&self) -> usize {
        self.data.len() / self.n_charts.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_charts..(i + 1) * self.n_charts]
    }

    /// Mean responsibility of each chart.
    pub fn means(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut m = vec![0.0; self.n_charts];
        for i in 0..self.len() {
            for (mc, r) in m.iter_mut().zip(self.row(i)) {
                *mc += r / n;
            }
        }
        m
    }
}

/// `log Σ exp(v)`, stable; `-∞` when every entry is `-∞`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Softmax of log-weights; all `-∞` yields the uniform row.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![1.0 / v.len() as f64; v.len()];
    }
    let e: Vec<f64> = v.iter().map(|a| (a - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|a| a / total).collect()
}

/// Drop weights below `threshold` and renormalize the rest. Returns
/// `(chart, weight)` pairs.
pub fn filter_responsibilities(row: &[f64], threshold: f64) -> Result<Vec<(usize, f64)>> {
    let kept: Vec<(usize, f64)> = row
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= threshold && r > 0.0)
        .map(|(c, &r)| (c, r))
        .collect();
    let total: f64 = kept.iter().map(|(_, r)| r).sum();
    if kept.is_empty() || !(total > 0.0) {
        return Err(Error::NoActiveChart { threshold });
    }
    Ok(kept.into_iter().map(|(c, r)| (c, r / total)).collect())
}

impl Atlas {
    pub fn new(flow: FlowConfig, n_charts: usize, seed: u64) -> Result<Self> {
        if n_charts == 0 {
            return Err(Error::Config("an atlas needs at least one chart".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let charts = (0..n_charts)
            .map(|_| ChartFlow::new(flow.clone(), rng.random()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Atlas {
            charts,
            resp_threshold: 0.05,
            lambda_recon: 1000.0,
            lambda_balance: 0.0,
            data_radius: 0.0,
        })
    }

    pub fn from_charts(charts: Vec<ChartFlow>) -> Result<Self> {
        let first = charts
            .first()
            .ok_or_else(|| Error::Config("an atlas needs at least one chart".into()))?;
        let (d, big_d) = (first.latent_dim(), first.ambient_dim());
        if charts
            .iter()
            .any(|c| c.latent_dim() != d || c.ambient_dim() != big_d)
        {
            return Err(Error::Config("charts disagree on dimensions".into()));
        }
        Ok(Atlas {
            charts,
            resp_threshold: 0.05,
            lambda_recon: 1000.0,
            lambda_balance: 0.0,
            data_radius: 0.0,
        })
    }

    pub fn n_charts(&self) -> usize {
        self.charts.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.charts[0].latent_dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.charts[0].ambient_dim()
    }

    /// The fixed uniform prior `q(c) = 1/C`.
    pub fn chart_prior(&self) -> Vec<f64> {
        vec![1.0 / self.n_charts() as f64; self.n_charts()]
    }

    fn check_chart(&self, c: usize) -> Result<()> {
        if c >= self.n_charts() {
            return Err(Error::Validation(format!(
                "chart index {c} out of range for {} charts",
                self.n_charts()
            )));
        }
        Ok(())
    }

    /// `log q(x|c) − λ‖x − h̃_c(h̃_c†(x))‖²`.
    pub fn regularized_log_component(&self, x: &[f64], c: usize) -> Result<f64> {
        self.check_chart(c)?;
        let t = self.charts[c].density_terms(x)?;
        Ok(t.log_density() - self.lambda_recon * t.residual)
    }

    /// Regularized log components of every chart; charts whose density
    /// cannot be evaluated at `x` contribute `-∞`.
    pub fn component_logs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ambient_dim() {
            return Err(Error::Dimension {
                op: "component_logs",
                expected: self.ambient_dim(),
                got: x.len(),
            });
        }
        self.charts
            .iter()
            .map(|f| {
                crate::flows::engine::forward(f, x, true)
                    .map(|p| p.log_q - self.lambda_recon * p.residual)
            })
            .map(|r| match r {
                Ok(v) => Ok(v),
                Err(e) if e.is_numerical() => Ok(f64::NEG_INFINITY),
                Err(e) => Err(e),
            })
            .collect()
    }

    /// `log Σ_c q(c) exp(regularized component)`.
    pub fn mixture_log_density(&self, x: &[f64]) -> Result<f64> {
        let mut v = self.component_logs(x)?;
        let lp = -(self.n_charts() as f64).ln();
        for a in &mut v {
            *a += lp;
        }
        Ok(logsumexp(&v))
    }

    /// Softmax of the regularized components of one point.
    pub fn responsibility_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.component_logs(x)?))
    }

    pub fn responsibilities(&self, xs: &Points) -> Result<Responsibilities> {
        self.check_points(xs)?;
        let rows: Vec<Vec<f64>> = (0..xs.len())
            .into_par_iter()
            .map(|i| self.responsibility_row(xs.row(i)))
            .collect::<Result<_>>()?;
        Ok(Responsibilities {
            n_charts: self.n_charts(),
            data: rows.concat(),
        })
    }

    /// Thresholded responsibilities at `x`, renormalized.
    pub fn active_charts(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        filter_responsibilities(&self.responsibility_row(x)?, self.resp_threshold)
    }

    pub(crate) fn check_points(&self, xs: &Points) -> Result<()> {
        if xs.dim() != self.ambient_dim() {
            return Err(Error::Dimension {
                op: "atlas",
                expected: self.ambient_dim(),
                got: xs.dim(),
            });
        }
        Ok(())
    }

    /// M-step objective at fixed responsibilities:
    /// `−Σ_i Σ_c [r_ic ≥ τ] r_ic ℓ_ic + λ_b Σ_c (mean_i r_ic − 1/C)²`.
    /// Returns the loss and the number of points with no chart above the
    /// threshold (those are skipped).
    pub fn em_m_step_loss(&self, xs: &Points, resp: &Responsibilities) -> Result<(f64, usize)> {
        self.check_points(xs)?;
        if resp.n_charts != self.n_charts() || resp.len() != xs.len() {
            return Err(Error::Validation(
                "responsibility matrix does not match data".into(),
            ));
        }
        let mut loss = 0.0;
        let mut skipped = 0;
        for i in 0..xs.len() {
            let row = resp.row(i);
            let mut any = false;
            for (c, &r) in row.iter().enumerate() {
                if r >= self.resp_threshold && r > 0.0 {
                    any = true;
                    loss -= r * self.regularized_log_component(xs.row(i), c)?;
                }
            }
            if !any {
                skipped += 1;
            }
        }
        let inv_c = 1.0 / self.n_charts() as f64;
        let balance: f64 = resp.means().iter().map(|m| (m - inv_c).powi(2)).sum();
        Ok((loss + self.lambda_balance * balance, skipped))
    }

    /// Draws from the mixture: chart uniformly at random, then the chart's
    /// pushforward.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Points> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Points::with_capacity(self.ambient_dim(), n);
        for _ in 0..n {
            let c = rng.random_range(0..self.n_charts());
            let x = self.charts[c].sample_with(1, &mut rng)?;
            out.push(x.row(0))?;
        }
        Ok(out)
    }
}
