//! Degenerate normalizing flows `f = h ∘ Pad ∘ g` built from affine coupling
//! layers.
//!
//! `g` is a square flow on the latent space `R^d`, `h` a square flow on the
//! ambient space `R^D`. The embedding `h̃ = h ∘ Pad` maps `R^d` onto a
//! d-dimensional surface and `h̃† = Proj ∘ h⁻¹` is its left inverse, which
//! doubles as a projection of ambient points onto that surface.
//!
//! All parameters live in one flat vector; [`FlowLayout`] records where each
//! network's weights start. Evaluation is generic over [`Scalar`] so the same
//! code serves plain values, Jacobians and second-order quadratic forms.

pub(crate) mod engine;
mod mlp;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Scalar, SmoothFn};
use crate::error::{Error, Result};
use crate::points::{dist2, Points};

pub use mlp::MlpShape;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Architecture of one chart flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub latent_dim: usize,
    pub ambient_dim: usize,
    pub g_layers: usize,
    pub h_layers: usize,
    pub hidden: usize,
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            latent_dim: 2,
            ambient_dim: 3,
            g_layers: 3,
            h_layers: 9,
            hidden: 16,
            s_max: 2.0,
        }
    }
}

/// Affine coupling layer: coordinates with `mask[i] == true` pass through
/// and condition the scale/shift applied to the others.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub dim: usize,
    pub mask: Vec<bool>,
    pub(crate) pass: Vec<usize>,
    pub(crate) transform: Vec<usize>,
    pub scale: MlpShape,
    pub shift: MlpShape,
}

impl CouplingLayer {
    fn new(mask: Vec<bool>, hidden: usize, offset: usize) -> Self {
        let dim = mask.len();
        let pass: Vec<usize> = (0..dim).filter(|&i| mask[i]).collect();
        let transform: Vec<usize> = (0..dim).filter(|&i| !mask[i]).collect();
        let scale = MlpShape::new(pass.len(), hidden, transform.len(), offset);
        let shift = MlpShape::new(pass.len(), hidden, transform.len(), scale.end());
        CouplingLayer {
            dim,
            mask,
            pass,
            transform,
            scale,
            shift,
        }
    }

    pub fn n_params(&self) -> usize {
        self.scale.n_params() + self.shift.n_params()
    }

    pub(crate) fn end(&self) -> usize {
        self.shift.end()
    }

    fn scale_and_shift<S: Scalar>(&self, params: &[f64], s_max: f64, y: &[S]) -> (Vec<S>, Vec<S>) {
        let a: Vec<S> = self.pass.iter().map(|&i| y[i]).collect();
        let raw = self.scale.eval(params, &a);
        let t = self.shift.eval(params, &a);
        let s = raw.into_iter().map(|r| r.tanh() * s_max).collect();
        (s, t)
    }

    /// In place `y ← layer(y)`, returns log|det J|.
    pub fn forward<S: Scalar>(&self, params: &[f64], s_max: f64, y: &mut [S]) -> S {
        let (s, t) = self.scale_and_shift(params, s_max, y);
        let mut logdet = S::zero();
        for (k, &q) in self.transform.iter().enumerate() {
            y[q] = y[q] * s[k].exp() + t[k];
            logdet += s[k];
        }
        logdet
    }

    /// In place `y ← layer⁻¹(y)`, returns log|det J| of the forward layer at
    /// the result.
    pub fn inverse<S: Scalar>(&self, params: &[f64], s_max: f64, y: &mut [S]) -> S {
        let (s, t) = self.scale_and_shift(params, s_max, y);
        let mut logdet = S::zero();
        for (k, &q) in self.transform.iter().enumerate() {
            y[q] = (y[q] - t[k]) * (-s[k]).exp();
            logdet += s[k];
        }
        logdet
    }
}

fn alternating_masks(dim: usize, layers: usize) -> Vec<Vec<bool>> {
    (0..layers)
        .map(|l| {
            if dim == 1 {
                // a single coordinate has nothing to condition on: the layer
                // is a learned affine map
                vec![false]
            } else {
                (0..dim).map(|i| (i + l) % 2 == 0).collect()
            }
        })
        .collect()
}

/// Parameter layout of a chart flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayout {
    pub config: FlowConfig,
    pub g: Vec<CouplingLayer>,
    pub h: Vec<CouplingLayer>,
    pub n_params: usize,
    /// Parameters `[0, g_end)` belong to `g`, the rest to `h`.
    pub g_end: usize,
}

impl FlowLayout {
    pub fn new(config: FlowConfig) -> Result<Self> {
        let masks_g = alternating_masks(config.latent_dim, config.g_layers);
        let masks_h = alternating_masks(config.ambient_dim, config.h_layers);
        Self::from_masks(config, masks_g, masks_h)
    }

    pub fn from_masks(
        config: FlowConfig,
        masks_g: Vec<Vec<bool>>,
        masks_h: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if config.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        if config.latent_dim > config.ambient_dim {
            return Err(Error::Config(format!(
                "latent dimension {} exceeds ambient dimension {}",
                config.latent_dim, config.ambient_dim
            )));
        }
        if config.hidden == 0 || !(config.s_max > 0.0) {
            return Err(Error::Config(
                "hidden width and scale cap must be positive".into(),
            ));
        }
        if masks_g.len() != config.g_layers || masks_h.len() != config.h_layers {
            return Err(Error::Config(
                "mask count does not match layer count".into(),
            ));
        }
        let mut offset = 0;
        let mut g = Vec::with_capacity(masks_g.len());
        for m in masks_g {
            if m.len() != config.latent_dim {
                return Err(Error::Config("g mask has wrong length".into()));
            }
            let layer = CouplingLayer::new(m, config.hidden, offset);
            offset = layer.end();
            g.push(layer);
        }
        let g_end = offset;
        let mut h = Vec::with_capacity(masks_h.len());
        for m in masks_h {
            if m.len() != config.ambient_dim {
                return Err(Error::Config("h mask has wrong length".into()));
            }
            let layer = CouplingLayer::new(m, config.hidden, offset);
            offset = layer.end();
            h.push(layer);
        }
        Ok(FlowLayout {
            config,
            g,
            h,
            n_params: offset,
            g_end,
        })
    }
}

/// One chart: a degenerate flow with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartFlow {
    pub layout: FlowLayout,
    pub params: Vec<f64>,
}

/// Pad `z ∈ R^d` with `D - d` trailing zeros.
pub fn pad<S: Scalar>(z: &[S], ambient_dim: usize) -> Result<Vec<S>> {
    if z.len() > ambient_dim {
        return Err(Error::Dimension {
            op: "pad",
            expected: ambient_dim,
            got: z.len(),
        });
    }
    let mut out = z.to_vec();
    out.resize(ambient_dim, S::zero());
    Ok(out)
}

/// First `d` coordinates of `y`.
pub fn proj<S: Scalar>(y: &[S], latent_dim: usize) -> Result<Vec<S>> {
    if latent_dim > y.len() {
        return Err(Error::Dimension {
            op: "proj",
            expected: y.len(),
            got: latent_dim,
        });
    }
    Ok(y[..latent_dim].to_vec())
}

/// Decomposed log-density of a point under one chart.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTerms {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub log_base: f64,
    pub logdet_g: f64,
    pub half_logdet_gram: f64,
    pub x_rec: Vec<f64>,
    pub residual: f64,
}

impl DensityTerms {
    pub fn log_density(&self) -> f64 {
        self.log_base - self.logdet_g - self.half_logdet_gram
    }
}

/// `h̃ = h ∘ Pad` as a [`SmoothFn`].
pub struct Embedding<'a>(pub &'a ChartFlow);

impl SmoothFn for Embedding<'_> {
    fn input_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn output_dim(&self) -> usize {
        self.0.ambient_dim()
    }
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        self.0.h_tilde(z).expect("dimension checked by caller")
    }
}

/// `h̃ ∘ h̃†`, the projection onto the chart surface, as a [`SmoothFn`].
pub struct SurfaceProjection<'a>(pub &'a ChartFlow);

impl SmoothFn for SurfaceProjection<'_> {
    fn input_dim(&self) -> usize {
        self.0.ambient_dim()
    }
    fn output_dim(&self) -> usize {
        self.0.ambient_dim()
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let z = self.0.h_dagger(x).expect("dimension checked by caller");
        self.0.h_tilde(&z).expect("dimension checked by caller")
    }
}

/// `h̃†` as a [`SmoothFn`].
pub struct LatentCoordinates<'a>(pub &'a ChartFlow);

impl SmoothFn for LatentCoordinates<'_> {
    fn input_dim(&self) -> usize {
        self.0.ambient_dim()
    }
    fn output_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        self.0.h_dagger(x).expect("dimension checked by caller")
    }
}

impl ChartFlow {
    /// Identity-initialized flow: hidden layers random, output layers zero.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        let layout = FlowLayout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.n_params];
        for layer in layout.g.iter().chain(&layout.h) {
            layer.scale.init(&mut params, &mut rng);
            layer.shift.init(&mut params, &mut rng);
        }
        Ok(ChartFlow { layout, params })
    }

    pub fn from_parts(layout: FlowLayout, params: Vec<f64>) -> Result<Self> {
        if params.len() != layout.n_params {
            return Err(Error::Dimension {
                op: "ChartFlow::from_parts",
                expected: layout.n_params,
                got: params.len(),
            });
        }
        Ok(ChartFlow { layout, params })
    }

    /// Fill every parameter with N(0, scale²); used to build generic
    /// (non-identity) flows for testing.
    pub fn randomize(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let n: f64 = StandardNormal.sample(&mut rng);
            *p = scale * n;
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.layout.config.latent_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.layout.config.ambient_dim
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    fn s_max(&self) -> f64 {
        self.layout.config.s_max
    }

    fn check(&self, op: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::Dimension { op, expected, got });
        }
        Ok(())
    }

    /// `z = g(u)` and `log|det J_g(u)|`.
    pub fn g_forward<S: Scalar>(&self, u: &[S]) -> Result<(Vec<S>, S)> {
        self.check("g_forward", self.latent_dim(), u.len())?;
        let mut y = u.to_vec();
        let mut logdet = S::zero();
        for layer in &self.layout.g {
            logdet += layer.forward(&self.params, self.s_max(), &mut y);
        }
        Ok((y, logdet))
    }

    /// `u = g⁻¹(z)` and `log|det J_g(u)|`.
    pub fn g_inverse<S: Scalar>(&self, z: &[S]) -> Result<(Vec<S>, S)> {
        self.check("g_inverse", self.latent_dim(), z.len())?;
        let mut y = z.to_vec();
        let mut logdet = S::zero();
        for layer in self.layout.g.iter().rev() {
            logdet += layer.inverse(&self.params, self.s_max(), &mut y);
        }
        Ok((y, logdet))
    }

    pub fn h_forward<S: Scalar>(&self, y: &[S]) -> Result<Vec<S>> {
        self.check("h_forward", self.ambient_dim(), y.len())?;
        let mut y = y.to_vec();
        for layer in &self.layout.h {
            layer.forward(&self.params, self.s_max(), &mut y);
        }
        Ok(y)
    }

    pub fn h_inverse<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        self.check("h_inverse", self.ambient_dim(), x.len())?;
        let mut y = x.to_vec();
        for layer in self.layout.h.iter().rev() {
            layer.inverse(&self.params, self.s_max(), &mut y);
        }
        Ok(y)
    }

    /// The embedding `h̃(z) = h(Pad(z))`.
    pub fn h_tilde<S: Scalar>(&self, z: &[S]) -> Result<Vec<S>> {
        self.check("h_tilde", self.latent_dim(), z.len())?;
        self.h_forward(&pad(z, self.ambient_dim())?)
    }

    /// Latent coordinates `h̃†(x) = Proj(h⁻¹(x))`.
    pub fn h_dagger<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        proj(&self.h_inverse(x)?, self.latent_dim())
    }

    /// `x = h̃(g(u))` and `log|det J_g(u)|`.
    pub fn forward(&self, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, logdet) = self.g_forward(u)?;
        let x = self.h_tilde(&z)?;
        finite("forward", &x)?;
        Ok((x, logdet))
    }

    /// `x_rec = h̃(h̃†(x))` and the squared residual `‖x − x_rec‖²`.
    pub fn reconstruct(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let z = self.h_dagger(x)?;
        let x_rec = self.h_tilde(&z)?;
        finite("reconstruct", &x_rec)?;
        let r = dist2(x, &x_rec);
        Ok((x_rec, r))
    }

    /// Jacobian of `h̃` at `z` (`D×d`).
    pub fn embedding_jacobian(&self, z: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check("embedding_jacobian", self.latent_dim(), z.len())?;
        Ok(autodiff::value_and_jacobian(&Embedding(self), z)?)
    }

    /// All terms entering the log-density of `x` (after projection onto the
    /// chart surface).
    pub fn density_terms(&self, x: &[f64]) -> Result<DensityTerms> {
        self.check("log_density", self.ambient_dim(), x.len())?;
        let z = self.h_dagger(x)?;
        let (x_rec, jac) = self.embedding_jacobian(&z)?;
        let gram = jac.transpose() * &jac;
        let chol = gram.cholesky().ok_or(Error::SingularMetric {
            context: "log_density",
        })?;
        let half_logdet_gram: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let (u, logdet_g) = self.g_inverse(&z)?;
        let d = self.latent_dim() as f64;
        let log_base = -0.5 * u.iter().map(|a| a * a).sum::<f64>() - 0.5 * d * LOG_2PI;
        let residual = dist2(x, &x_rec);
        let terms = DensityTerms {
            z,
            u,
            log_base,
            logdet_g,
            half_logdet_gram,
            x_rec,
            residual,
        };
        if !terms.log_density().is_finite() {
            return Err(Error::numerical("log_density", "non-finite log-density"));
        }
        Ok(terms)
    }

    /// `log q(x) = log p(u) − log|det J_g| − ½ log det(J_h̃ᵀ J_h̃)` at
    /// `u = g⁻¹(h̃†(x))`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.density_terms(x).map(|t| t.log_density())
    }

    /// `n` draws pushed through the flow; deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Points> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Points> {
        let d = self.latent_dim();
        let mut out = Points::with_capacity(self.ambient_dim(), n);
        let mut u = vec![0.0; d];
        for _ in 0..n {
            for a in u.iter_mut() {
                *a = StandardNormal.sample(rng);
            }
            let (x, _) = self.forward(&u)?;
            out.push(&x)?;
        }
        Ok(out)
    }
}

fn finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(op, "non-finite output"))
    }
}
