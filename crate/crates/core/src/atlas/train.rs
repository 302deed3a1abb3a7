use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{filter_responsibilities, kmeans_init, logsumexp, softmax, Atlas};
use crate::error::{Error, Result};
use crate::eval::wasserstein;
use crate::flows::engine::{self, PointCache};
use crate::points::Points;

/// Points per parallel work unit. Partial gradients are summed in chunk
/// order so results do not depend on thread scheduling.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Multi-chart EM: softmax E-step, one gradient step per M-step.
    #[serde(alias = "mult")]
    Em,
    /// Multi-chart direct maximum likelihood through logsumexp.
    Mle,
    /// One chart, joint density and reconstruction objective.
    Single,
    /// One chart, reconstruction-only first half then density-only.
    SingleM,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrainMode::Em => "em",
            TrainMode::Mle => "mle",
            TrainMode::Single => "single",
            TrainMode::SingleM => "single_m",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every main epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub patience: usize,
    /// First epoch at which validation may trigger early stopping.
    pub validate_after: usize,
    pub lambda_recon: f64,
    pub lambda_balance: f64,
    pub resp_threshold: f64,
    /// Evaluate the validation Wasserstein distance every this many epochs
    /// (0 disables it; the history column is then empty).
    pub wasserstein_every: usize,
    pub wasserstein_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Em,
            epochs: 1000,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            seed: 0,
            pretrain_epochs: 200,
            patience: 50,
            validate_after: 100,
            lambda_recon: 1000.0,
            lambda_balance: 0.0,
            resp_threshold: 0.05,
            wasserstein_every: 0,
            wasserstein_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning_rate must be positive and lr_decay in (0, 1]");
        }
        if !(self.lambda_recon >= 0.0) || !(self.lambda_balance >= 0.0) {
            return bad("regularization weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.resp_threshold) {
            return bad("resp_threshold must lie in [0, 1)");
        }
        if self.wasserstein_samples == 0 {
            return bad("wasserstein_samples must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recon: f64,
    pub val_wasserstein: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_recon,val_wasserstein\n");
        for r in &self.rows {
            let w = r
                .val_wasserstein
                .map(|w| format!("{w:e}"))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{:e},{:e},{}\n",
                r.epoch, r.train_loss, r.val_recon, w
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub atlas: Atlas,
    pub history: History,
    /// Epoch (1-based, main loop) of the returned checkpoint.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Training aborted on a numerical failure; carries the last good state.
#[derive(Debug)]
pub struct TrainError {
    pub error: Error,
    pub checkpoint: Box<Trained>,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted after epoch {}: {}",
            self.checkpoint.best_epoch, self.error
        )
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        e.error
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, range: Range<usize>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in range {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Which per-point objective one optimization step uses.
#[derive(Clone, Copy, PartialEq)]
enum Objective {
    Em,
    Mle,
    /// Reconstruction only (first phase of single-M).
    Recon,
    /// `−log q` only (second phase of single-M).
    Density,
}

/// One optimization step on a batch; returns the batch loss.
fn batch_step(
    atlas: &mut Atlas,
    adams: &mut [Adam],
    xs: &Points,
    batch: &[usize],
    objective: Objective,
    lr: f64,
    charts: &[usize],
) -> Result<f64> {
    let n = batch.len() as f64;
    let lambda = atlas.lambda_recon;
    let with_density = objective != Objective::Recon;
    let atlas_ref = &*atlas;
    let caches: Vec<Vec<Vec<PointCache>>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    charts
                        .iter()
                        .map(|&c| engine::forward(&atlas_ref.charts[c], xs.row(i), with_density))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let k = charts.len();
    let inv_k = 1.0 / k as f64;
    // coefficients (a, b) of ∂loss/∂log_q and ∂loss/∂residual per point and chart
    let mut coef: Vec<Vec<(f64, f64)>> = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    match objective {
        Objective::Recon | Objective::Density => {
            for cache in caches.iter().flatten() {
                let c = &cache[0];
                if objective == Objective::Recon {
                    loss += c.residual / n;
                    coef.push(vec![(0.0, 1.0 / n)]);
                } else {
                    loss -= c.log_q / n;
                    coef.push(vec![(-1.0 / n, 0.0)]);
                }
            }
        }
        Objective::Em | Objective::Mle => {
            let regs: Vec<Vec<f64>> = caches
                .iter()
                .flatten()
                .map(|cs| cs.iter().map(|c| c.log_q - lambda * c.residual).collect())
                .collect();
            let resp: Vec<Vec<f64>> = regs.iter().map(|r| softmax(r)).collect();
            let mut means = vec![0.0; k];
            for r in &resp {
                for (m, v) in means.iter_mut().zip(r) {
                    *m += v / n;
                }
            }
            let dev: Vec<f64> = means.iter().map(|m| m - inv_k).collect();
            loss += atlas.lambda_balance * dev.iter().map(|d| d * d).sum::<f64>();
            for (reg, r) in regs.iter().zip(&resp) {
                let mut g = vec![0.0; k];
                if objective == Objective::Mle {
                    let shifted: Vec<f64> = reg.iter().map(|v| v + inv_k.ln()).collect();
                    loss -= logsumexp(&shifted) / n;
                    for c in 0..k {
                        g[c] = -r[c] / n;
                    }
                } else {
                    for c in 0..k {
                        if r[c] >= atlas.resp_threshold && r[c] > 0.0 {
                            loss -= r[c] * reg[c] / n;
                            g[c] = -r[c] / n;
                        }
                    }
                }
                if atlas.lambda_balance > 0.0 {
                    let avg: f64 = dev.iter().zip(r).map(|(d, rc)| d * rc).sum();
                    for c in 0..k {
                        g[c] += 2.0 * atlas.lambda_balance / n * r[c] * (dev[c] - avg);
                    }
                }
                coef.push(g.into_iter().map(|gc| (gc, -lambda * gc)).collect());
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::numerical("train", "non-finite batch loss"));
    }

    let coef_chunks: Vec<&[Vec<(f64, f64)>]> = coef.chunks(CHUNK).collect();
    let partial: Vec<Vec<Vec<f64>>> = caches
        .par_iter()
        .zip(coef_chunks.par_iter())
        .map(|(chunk, coefs)| {
            let mut grads: Vec<Vec<f64>> = charts
                .iter()
                .map(|&c| vec![0.0; atlas_ref.charts[c].n_params()])
                .collect();
            for (point, pc) in chunk.iter().zip(coefs.iter()) {
                for (slot, (cache, &(a, b))) in point.iter().zip(pc).enumerate() {
                    if a != 0.0 || b != 0.0 {
                        engine::backward(
                            &atlas_ref.charts[charts[slot]],
                            cache,
                            a,
                            b,
                            &mut grads[slot],
                        );
                    }
                }
            }
            grads
        })
        .collect();
    for (slot, &c) in charts.iter().enumerate() {
        let mut grad = vec![0.0; atlas.charts[c].n_params()];
        for p in &partial {
            for (g, v) in grad.iter_mut().zip(&p[slot]) {
                *g += v;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical("train", "non-finite gradient"));
        }
        let g_end = atlas.charts[c].layout.g_end;
        let range = match objective {
            Objective::Recon => g_end..grad.len(),
            Objective::Density => 0..g_end,
            _ => 0..grad.len(),
        };
        adams[c].step(&mut atlas.charts[c].params, &grad, lr, range);
    }
    Ok(loss)
}

/// Mean squared distance between validation points and their projection
/// onto the atlas (responsibility-weighted chart reconstructions).
pub(crate) fn projection_recon(atlas: &Atlas, xs: &Points) -> Result<f64> {
    let single = atlas.n_charts() == 1;
    let per_point: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let x = xs.row(i);
            let caches = atlas
                .charts
                .iter()
                .map(|ch| engine::forward(ch, x, !single))
                .collect::<Result<Vec<_>>>()?;
            if single {
                return Ok(caches[0].residual);
            }
            let regs: Vec<f64> = caches
                .iter()
                .map(|c| c.log_q - atlas.lambda_recon * c.residual)
                .collect();
            let active = filter_responsibilities(&softmax(&regs), atlas.resp_threshold)?;
            let mut proj = vec![0.0; x.len()];
            for (c, w) in active {
                for (p, r) in proj.iter_mut().zip(caches[c].reconstruction()) {
                    *p += w * r;
                }
            }
            Ok(x.iter().zip(&proj).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .collect::<Result<_>>()?;
    Ok(per_point.iter().sum::<f64>() / xs.len().max(1) as f64)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn val_wasserstein(atlas: &Atlas, val: &Points, m: usize, seed: u64) -> Result<f64> {
    let m = m.min(val.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = shuffled(val.len(), &mut rng).into_iter().take(m).collect();
    let samples = atlas.sample(m, rng.random())?;
    wasserstein(&samples, &val.select(&idx))
}

struct Loop<'a> {
    atlas: Atlas,
    adams: Vec<Adam>,
    history: History,
    rng: ChaCha8Rng,
    cfg: &'a TrainConfig,
    lr: f64,
}

impl Loop<'_> {
    fn fail(self, error: Error, best: Option<(Atlas, usize)>) -> TrainError {
        let (atlas, best_epoch) = best.unwrap_or((self.atlas, 0));
        TrainError {
            error,
            checkpoint: Box::new(Trained {
                atlas,
                history: self.history,
                best_epoch,
                stopped_early: true,
            }),
        }
    }

    fn epoch(&mut self, xs: &Points, objective: Objective, charts: &[usize]) -> Result<f64> {
        let order = shuffled(xs.len(), &mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            total += batch_step(
                &mut self.atlas,
                &mut self.adams,
                xs,
                batch,
                objective,
                self.lr,
                charts,
            )?;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }
}

/// Fits the atlas to `train_set`, early-stopping on `val_set`.
pub fn train(
    atlas: Atlas,
    train_set: &Points,
    val_set: &Points,
    cfg: &TrainConfig,
) -> std::result::Result<Trained, TrainError> {
    let fail_early = |atlas: Atlas, error: Error| TrainError {
        error,
        checkpoint: Box::new(Trained {
            atlas,
            history: History::default(),
            best_epoch: 0,
            stopped_early: true,
        }),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail_early(atlas, e));
    }
    if let Err(e) = atlas
        .check_points(train_set)
        .and(atlas.check_points(val_set))
    {
        return Err(fail_early(atlas, e));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(fail_early(
            atlas,
            Error::Validation("training and validation sets must be non-empty".into()),
        ));
    }
    let single = matches!(cfg.mode, TrainMode::Single | TrainMode::SingleM);
    if single && atlas.n_charts() != 1 {
        let n = atlas.n_charts();
        return Err(fail_early(
            atlas,
            Error::Config(format!(
                "mode {} needs exactly one chart, got {n}",
                cfg.mode
            )),
        ));
    }
    if !train_set.as_flat().iter().all(|v| v.is_finite()) {
        return Err(fail_early(
            atlas,
            Error::Validation("non-finite training data".into()),
        ));
    }

    let mut atlas = atlas;
    atlas.lambda_recon = cfg.lambda_recon;
    atlas.lambda_balance = cfg.lambda_balance;
    atlas.resp_threshold = cfg.resp_threshold;
    atlas.data_radius = train_set.max_norm();
    let adams = atlas
        .charts
        .iter()
        .map(|c| Adam::new(c.n_params()))
        .collect();
    let mut lp = Loop {
        atlas,
        adams,
        history: History::default(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg,
        lr: cfg.learning_rate,
    };

    let all: Vec<usize> = (0..lp.atlas.n_charts()).collect();
    if !single && cfg.pretrain_epochs > 0 {
        let clusters = match kmeans_init(train_set, lp.atlas.n_charts(), cfg.seed) {
            Ok(c) => c,
            Err(e) => return Err(lp.fail(e, None)),
        };
        if clusters.iter().any(|c| c.is_empty()) {
            return Err(lp.fail(Error::Validation("empty warm-up cluster".into()), None));
        }
        let subsets: Vec<Points> = clusters.iter().map(|c| train_set.select(c)).collect();
        for _ in 0..cfg.pretrain_epochs {
            for (c, xs) in subsets.iter().enumerate() {
                if let Err(e) = lp.epoch(xs, Objective::Mle, &[c]) {
                    return Err(lp.fail(e, None));
                }
            }
        }
    }

    match cfg.mode {
        TrainMode::Em | TrainMode::Mle | TrainMode::Single => {
            let objective = if cfg.mode == TrainMode::Em {
                Objective::Em
            } else {
                Objective::Mle
            };
            run_phase(
                lp,
                train_set,
                val_set,
                objective,
                &all,
                0,
                cfg.epochs,
                Stop::Recon,
            )
        }
        TrainMode::SingleM => {
            let first = cfg.epochs.div_ceil(2);
            let phase1 = run_phase(
                lp,
                train_set,
                val_set,
                Objective::Recon,
                &all,
                0,
                first,
                Stop::Recon,
            )?;
            let adams = phase1
                .atlas
                .charts
                .iter()
                .map(|c| Adam::new(c.n_params()))
                .collect();
            let lp = Loop {
                atlas: phase1.atlas,
                adams,
                history: phase1.history,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
                cfg,
                lr: cfg.learning_rate,
            };
            run_phase(
                lp,
                train_set,
                val_set,
                Objective::Density,
                &all,
                first,
                cfg.epochs - first,
                Stop::Wasserstein,
            )
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stop {
    Recon,
    Wasserstein,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    mut lp: Loop<'_>,
    train_set: &Points,
    val_set: &Points,
    objective: Objective,
    charts: &[usize],
    epoch_offset: usize,
    epochs: usize,
    stop: Stop,
) -> std::result::Result<Trained, TrainError> {
    let cfg = lp.cfg;
    let mut best: Option<(Atlas, usize)> = None;
    let mut best_score = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for e in 1..=epochs {
        let epoch = epoch_offset + e;
        let loss = match lp.epoch(train_set, objective, charts) {
            Ok(l) => l,
            Err(err) => return Err(lp.fail(err, best)),
        };
        lp.lr *= cfg.lr_decay;
        let val_recon = match projection_recon(&lp.atlas, val_set) {
            Ok(v) => v,
            Err(err) => return Err(lp.fail(err, best)),
        };
        let want_w = stop == Stop::Wasserstein
            || (cfg.wasserstein_every > 0 && epoch % cfg.wasserstein_every == 0);
        let val_w = if want_w {
            match val_wasserstein(
                &lp.atlas,
                val_set,
                cfg.wasserstein_samples,
                cfg.seed ^ epoch as u64,
            ) {
                Ok(w) => Some(w),
                Err(err) => return Err(lp.fail(err, best)),
            }
        } else {
            None
        };
        lp.history.rows.push(HistoryRow {
            epoch,
            train_loss: loss,
            val_recon,
            val_wasserstein: val_w,
        });
        let score = match stop {
            Stop::Recon => val_recon,
            Stop::Wasserstein => val_w.unwrap_or(f64::INFINITY),
        };
        if e < cfg.validate_after {
            best = Some((lp.atlas.clone(), epoch));
            continue;
        }
        if score < best_score {
            best_score = score;
            best = Some((lp.atlas.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (atlas, best_epoch) = best.unwrap_or_else(|| (lp.atlas.clone(), epoch_offset));
    Ok(Trained {
        atlas,
        history: lp.history,
        best_epoch,
        stopped_early,
    })
}
