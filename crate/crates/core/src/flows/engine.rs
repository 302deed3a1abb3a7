//! Parameter gradients of the per-chart training objective.
//!
//! Training needs `∂/∂θ` of `a·log q(x) + b·‖x − h̃(h̃†(x))‖²`, where the
//! log-density already contains first derivatives of the flow (the Gram
//! determinant of `J_h̃`). The forward pass below pushes `d` tangent
//! directions through `h̃` alongside the primal values; the backward pass
//! then differentiates that computation with hand-written adjoints, so one
//! sweep yields the full parameter gradient.

use nalgebra::DMatrix;

use super::mlp::MlpShape;
use super::{ChartFlow, CouplingLayer, LOG_2PI};
use crate::error::{Error, Result};

/// `tanh` through one `exp`; absolute error stays at rounding level.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 19.0 {
        return x.signum();
    }
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Offsets into the single buffer backing an [`MlpCache`].
#[derive(Clone, Copy)]
struct MlpLayout {
    n_in: usize,
    hid: usize,
    n_out: usize,
    k: usize,
}

impl MlpLayout {
    fn a(&self) -> usize {
        0
    }
    fn adot(&self) -> usize {
        self.n_in
    }
    fn h1(&self) -> usize {
        self.adot() + self.k * self.n_in
    }
    fn h2(&self) -> usize {
        self.h1() + self.hid
    }
    fn m1(&self) -> usize {
        self.h2() + self.hid
    }
    fn hd1(&self) -> usize {
        self.m1() + self.k * self.hid
    }
    fn m2(&self) -> usize {
        self.hd1() + self.k * self.hid
    }
    fn hd2(&self) -> usize {
        self.m2() + self.k * self.hid
    }
    fn out(&self) -> usize {
        self.hd2() + self.k * self.hid
    }
    fn odot(&self) -> usize {
        self.out() + self.n_out
    }
    fn len(&self) -> usize {
        self.odot() + self.k * self.n_out
    }
}

struct MlpCache {
    lay: MlpLayout,
    buf: Vec<f64>,
}

impl MlpCache {
    fn get(&self, start: usize, len: usize) -> &[f64] {
        &self.buf[start..start + len]
    }
    fn out(&self) -> &[f64] {
        self.get(self.lay.out(), self.lay.n_out)
    }
    fn odot(&self) -> &[f64] {
        self.get(self.lay.odot(), self.lay.k * self.lay.n_out)
    }
}

/// Forward pass through an MLP with `k` tangents (`adot` holds `k` input
/// tangents back to back).
fn mlp_forward(shape: &MlpShape, params: &[f64], a: &[f64], adot: &[f64], k: usize) -> MlpCache {
    let (n_in, hid, n_out) = (shape.input, shape.hidden, shape.output);
    let lay = MlpLayout {
        n_in,
        hid,
        n_out,
        k,
    };
    let mut buf = vec![0.0; lay.len()];
    let w1 = &params[shape.w1()..shape.b1()];
    let b1 = &params[shape.b1()..shape.w2()];
    let w2 = &params[shape.w2()..shape.b2()];
    let b2 = &params[shape.b2()..shape.w3()];
    let w3 = &params[shape.w3()..shape.b3()];
    let b3 = &params[shape.b3()..shape.end()];

    buf[..n_in].copy_from_slice(a);
    buf[lay.adot()..lay.h1()].copy_from_slice(adot);
    {
        let (head, tail) = buf.split_at_mut(lay.h1());
        let (a, adot) = (&head[..n_in], &head[n_in..]);
        let (h1, rest) = tail.split_at_mut(hid);
        let rest = &mut rest[hid..];
        let (m1, hd1) = rest.split_at_mut(k * hid);
        let hd1 = &mut hd1[..k * hid];
        for r in 0..hid {
            h1[r] = fast_tanh(b1[r] + dot(&w1[r * n_in..(r + 1) * n_in], a));
        }
        for j in 0..k {
            let m = &mut m1[j * hid..(j + 1) * hid];
            matvec(w1, &adot[j * n_in..(j + 1) * n_in], m);
            for r in 0..hid {
                hd1[j * hid + r] = (1.0 - h1[r] * h1[r]) * m[r];
            }
        }
    }
    {
        let (head, tail) = buf.split_at_mut(lay.h2());
        let h1 = &head[lay.h1()..];
        let (h2, rest) = tail.split_at_mut(hid);
        let hd1_start = lay.hd1() - lay.m1();
        let (pre, m2hd2) = rest.split_at_mut(lay.m2() - lay.m1());
        let hd1 = &pre[hd1_start..];
        let (m2, hd2) = m2hd2.split_at_mut(k * hid);
        for r in 0..hid {
            h2[r] = fast_tanh(b2[r] + dot(&w2[r * hid..(r + 1) * hid], h1));
        }
        for j in 0..k {
            let m = &mut m2[j * hid..(j + 1) * hid];
            matvec(w2, &hd1[j * hid..(j + 1) * hid], m);
            for r in 0..hid {
                hd2[j * hid + r] = (1.0 - h2[r] * h2[r]) * m[r];
            }
        }
    }
    {
        let (head, tail) = buf.split_at_mut(lay.out());
        let h2 = &head[lay.h2()..lay.h2() + hid];
        let hd2 = &head[lay.hd2()..];
        let (out, odot) = tail.split_at_mut(n_out);
        for r in 0..n_out {
            out[r] = b3[r] + dot(&w3[r * hid..(r + 1) * hid], h2);
        }
        for j in 0..k {
            matvec(
                w3,
                &hd2[j * hid..(j + 1) * hid],
                &mut odot[j * n_out..(j + 1) * n_out],
            );
        }
    }
    MlpCache { lay, buf }
}

/// Backward pass: accumulates parameter gradients into `grad` and adds the
/// adjoints of the input and its tangents into `abar` / `adotbar`.
#[allow(clippy::too_many_arguments)]
fn mlp_backward(
    shape: &MlpShape,
    params: &[f64],
    cache: &MlpCache,
    obar: &[f64],
    odotbar: &[f64],
    grad: &mut [f64],
    abar: &mut [f64],
    adotbar: &mut [f64],
) {
    let lay = cache.lay;
    let (n_in, hid, n_out, k) = (lay.n_in, lay.hid, lay.n_out, lay.k);
    let w1 = &params[shape.w1()..shape.b1()];
    let w2 = &params[shape.w2()..shape.b2()];
    let w3 = &params[shape.w3()..shape.b3()];
    let h2 = cache.get(lay.h2(), hid);
    let hd2 = cache.get(lay.hd2(), k * hid);

    let gw3 = shape.w3();
    for r in 0..n_out {
        let row = &mut grad[gw3 + r * hid..gw3 + (r + 1) * hid];
        axpy(obar[r], h2, row);
        for j in 0..k {
            axpy(odotbar[j * n_out + r], &hd2[j * hid..(j + 1) * hid], row);
        }
        grad[shape.b3() + r] += obar[r];
    }
    let mut scratch = vec![0.0; 2 * (hid + k * hid)];
    let (hbar, hdbar) = scratch.split_at_mut(hid + k * hid);
    let (h2bar, hd2bar) = hbar.split_at_mut(hid);
    matvec_t(w3, obar, h2bar);
    for j in 0..k {
        matvec_t(
            w3,
            &odotbar[j * n_out..(j + 1) * n_out],
            &mut hd2bar[j * hid..(j + 1) * hid],
        );
    }
    let (h1bar, hd1bar) = hdbar.split_at_mut(hid);
    tanh_layer_backward(
        w2,
        shape.w2(),
        shape.b2(),
        h2,
        cache.get(lay.m2(), k * hid),
        cache.get(lay.h1(), hid),
        cache.get(lay.hd1(), k * hid),
        k,
        h2bar,
        hd2bar,
        grad,
        h1bar,
        hd1bar,
    );
    tanh_layer_backward(
        w1,
        shape.w1(),
        shape.b1(),
        cache.get(lay.h1(), hid),
        cache.get(lay.m1(), k * hid),
        cache.get(lay.a(), n_in),
        cache.get(lay.adot(), k * n_in),
        k,
        h1bar,
        hd1bar,
        grad,
        abar,
        adotbar,
    );
}

/// Backward through `h = tanh(W p + b)`, `ḣ_j = (1 − h²) ⊙ (W ṗ_j)`.
/// Overwrites `hbar`/`hdbar` with the pre-activation adjoints and adds the
/// adjoints of `p` and `ṗ_j` into `prevbar`/`prevdotbar`.
#[allow(clippy::too_many_arguments)]
fn tanh_layer_backward(
    w: &[f64],
    gw: usize,
    gb: usize,
    h: &[f64],
    m: &[f64],
    prev: &[f64],
    prev_dot: &[f64],
    k: usize,
    hbar: &mut [f64],
    hdbar: &mut [f64],
    grad: &mut [f64],
    prevbar: &mut [f64],
    prevdotbar: &mut [f64],
) {
    let hid = h.len();
    let n_prev = prev.len();
    for r in 0..hid {
        let sp = 1.0 - h[r] * h[r];
        let mut acc = hbar[r] * sp;
        for j in 0..k {
            let g = hdbar[j * hid + r];
            acc += g * m[j * hid + r] * (-2.0 * h[r] * sp);
            hdbar[j * hid + r] = g * sp;
        }
        hbar[r] = acc;
    }
    let (prebar, mbar) = (&*hbar, &*hdbar);
    for r in 0..hid {
        let row = &mut grad[gw + r * n_prev..gw + (r + 1) * n_prev];
        axpy(prebar[r], prev, row);
        for j in 0..k {
            axpy(
                mbar[j * hid + r],
                &prev_dot[j * n_prev..(j + 1) * n_prev],
                row,
            );
        }
        grad[gb + r] += prebar[r];
    }
    matvec_t_add(w, prebar, prevbar);
    for j in 0..k {
        matvec_t_add(
            w,
            &mbar[j * hid..(j + 1) * hid],
            &mut prevdotbar[j * n_prev..(j + 1) * n_prev],
        );
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    if alpha == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out = Wᵀ y` for row-major `W` with `out.len()` columns.
fn matvec_t(w: &[f64], y: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    matvec_t_add(w, y, out);
}

fn matvec_t_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &yr) in y.iter().enumerate() {
        axpy(yr, &w[r * cols..(r + 1) * cols], out);
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cached quantities of one forward coupling layer with `k` tangents:
/// `b = y_Q`, `ḃ`, `tanh(raw scale)`, `exp(s)`, `ṡ`, `ṙ` back to back.
struct ForwardCache {
    nq: usize,
    k: usize,
    buf: Vec<f64>,
    scale: MlpCache,
    shift: MlpCache,
}

impl ForwardCache {
    fn b(&self) -> &[f64] {
        &self.buf[..self.nq]
    }
    fn bdot(&self) -> &[f64] {
        &self.buf[self.nq..self.nq * (1 + self.k)]
    }
    fn tau(&self) -> &[f64] {
        let s = self.nq * (1 + self.k);
        &self.buf[s..s + self.nq]
    }
    fn e(&self) -> &[f64] {
        let s = self.nq * (2 + self.k);
        &self.buf[s..s + self.nq]
    }
    fn sdot(&self) -> &[f64] {
        let s = self.nq * (3 + self.k);
        &self.buf[s..s + self.k * self.nq]
    }
    fn rdot(&self) -> &[f64] {
        let s = self.nq * (3 + 2 * self.k);
        &self.buf[s..s + self.k * self.nq]
    }
}

fn gather_into(v: &[f64], n: usize, k: usize, idx: &[usize], out: &mut Vec<f64>) {
    for j in 0..k {
        out.extend(idx.iter().map(|&i| v[j * n + i]));
    }
}

fn coupling_forward(
    layer: &CouplingLayer,
    params: &[f64],
    s_max: f64,
    y: &mut [f64],
    ydot: &mut [f64],
    k: usize,
) -> ForwardCache {
    let n = layer.dim;
    let nq = layer.transform.len();
    let np = layer.pass.len();
    let mut a = Vec::with_capacity(np * (1 + k));
    gather_into(y, n, 1, &layer.pass, &mut a);
    gather_into(ydot, n, k, &layer.pass, &mut a);
    let scale = mlp_forward(&layer.scale, params, &a[..np], &a[np..], k);
    let shift = mlp_forward(&layer.shift, params, &a[..np], &a[np..], k);
    let mut buf = Vec::with_capacity(nq * (3 + 3 * k));
    gather_into(y, n, 1, &layer.transform, &mut buf);
    gather_into(ydot, n, k, &layer.transform, &mut buf);
    buf.resize(nq * (3 + 3 * k), 0.0);
    let (r, rdot) = (scale.out(), scale.odot());
    let (t, tdot) = (shift.out(), shift.odot());
    for (qi, &q) in layer.transform.iter().enumerate() {
        let tau = fast_tanh(r[qi]);
        let ds = s_max * (1.0 - tau * tau);
        let e = (s_max * tau).exp();
        let b = buf[qi];
        buf[nq * (1 + k) + qi] = tau;
        buf[nq * (2 + k) + qi] = e;
        y[q] = b * e + t[qi];
        for j in 0..k {
            let rd = rdot[j * nq + qi];
            let sd = ds * rd;
            buf[nq * (3 + k) + j * nq + qi] = sd;
            buf[nq * (3 + 2 * k) + j * nq + qi] = rd;
            ydot[j * n + q] = buf[nq + j * nq + qi] * e + b * e * sd + tdot[j * nq + qi];
        }
    }
    ForwardCache {
        nq,
        k,
        buf,
        scale,
        shift,
    }
}

#[allow(clippy::too_many_arguments)]
fn coupling_forward_backward(
    layer: &CouplingLayer,
    params: &[f64],
    s_max: f64,
    cache: &ForwardCache,
    ybar: &mut [f64],
    ydotbar: &mut [f64],
    grad: &mut [f64],
) {
    let n = layer.dim;
    let nq = layer.transform.len();
    let np = layer.pass.len();
    let k = cache.k;
    // rbar | rdotbar | tbar | tdotbar | abar | adotbar
    let mut scratch = vec![0.0; 2 * nq * (1 + k) + np * (1 + k)];
    let (rs, rest) = scratch.split_at_mut(nq * (1 + k));
    let (ts, abuf) = rest.split_at_mut(nq * (1 + k));
    let (rbar, rdotbar) = rs.split_at_mut(nq);
    let (tbar, tdotbar) = ts.split_at_mut(nq);
    let (b_, bdot, tau_, e_, sdot, rdot) = (
        cache.b(),
        cache.bdot(),
        cache.tau(),
        cache.e(),
        cache.sdot(),
        cache.rdot(),
    );
    for (qi, &q) in layer.transform.iter().enumerate() {
        let (b, e, tau) = (b_[qi], e_[qi], tau_[qi]);
        let yb = ybar[q];
        let mut bbar = yb * e;
        let mut ebar = yb * b;
        let mut sdotbar_dr = 0.0;
        let ds = s_max * (1.0 - tau * tau);
        let d2s = s_max * (-2.0 * tau) * (1.0 - tau * tau);
        for j in 0..k {
            let g = ydotbar[j * n + q];
            let sd = sdot[j * nq + qi];
            bbar += g * e * sd;
            ebar += g * (bdot[j * nq + qi] + b * sd);
            let sdotbar = g * b * e;
            // ṡ = ds·ṙ depends on r through ds
            sdotbar_dr += sdotbar * d2s * rdot[j * nq + qi];
            rdotbar[j * nq + qi] = sdotbar * ds;
            tdotbar[j * nq + qi] = g;
            ydotbar[j * n + q] = g * e;
        }
        let sbar = ebar * e;
        rbar[qi] = sbar * ds + sdotbar_dr;
        tbar[qi] = yb;
        ybar[q] = bbar;
    }
    let (abar, adotbar) = abuf.split_at_mut(np);
    mlp_backward(
        &layer.scale,
        params,
        &cache.scale,
        rbar,
        rdotbar,
        grad,
        abar,
        adotbar,
    );
    mlp_backward(
        &layer.shift,
        params,
        &cache.shift,
        tbar,
        tdotbar,
        grad,
        abar,
        adotbar,
    );
    for (pi, &p) in layer.pass.iter().enumerate() {
        ybar[p] += abar[pi];
        for j in 0..k {
            ydotbar[j * n + p] += adotbar[j * np + pi];
        }
    }
}

/// Cached quantities of one inverse coupling layer: `x_Q`, `exp(−s)`,
/// `tanh(raw scale)` back to back.
struct InverseCache {
    buf: Vec<f64>,
    scale: MlpCache,
    shift: MlpCache,
}

/// In place inverse; returns the layer's log-determinant and cache.
fn coupling_inverse(
    layer: &CouplingLayer,
    params: &[f64],
    s_max: f64,
    y: &mut [f64],
) -> (f64, InverseCache) {
    let nq = layer.transform.len();
    let mut a = Vec::with_capacity(layer.pass.len());
    gather_into(y, layer.dim, 1, &layer.pass, &mut a);
    let scale = mlp_forward(&layer.scale, params, &a, &[], 0);
    let shift = mlp_forward(&layer.shift, params, &a, &[], 0);
    let (r, t) = (scale.out(), shift.out());
    let mut buf = vec![0.0; 3 * nq];
    let mut logdet = 0.0;
    for (qi, &q) in layer.transform.iter().enumerate() {
        let tau = fast_tanh(r[qi]);
        let s = s_max * tau;
        let einv = (-s).exp();
        let xq = (y[q] - t[qi]) * einv;
        buf[qi] = xq;
        buf[nq + qi] = einv;
        buf[2 * nq + qi] = tau;
        y[q] = xq;
        logdet += s;
    }
    (logdet, InverseCache { buf, scale, shift })
}

fn coupling_inverse_backward(
    layer: &CouplingLayer,
    params: &[f64],
    s_max: f64,
    cache: &InverseCache,
    xbar: &mut [f64],
    lbar: f64,
    grad: &mut [f64],
) {
    let nq = layer.transform.len();
    let np = layer.pass.len();
    let mut scratch = vec![0.0; 2 * nq + np];
    let (rt, abar) = scratch.split_at_mut(2 * nq);
    let (rbar, tbar) = rt.split_at_mut(nq);
    for (qi, &q) in layer.transform.iter().enumerate() {
        let g = xbar[q];
        let (xq, ei, tau) = (cache.buf[qi], cache.buf[nq + qi], cache.buf[2 * nq + qi]);
        tbar[qi] = -g * ei;
        let sbar = -g * xq + lbar;
        rbar[qi] = sbar * s_max * (1.0 - tau * tau);
        xbar[q] = g * ei;
    }
    mlp_backward(
        &layer.scale,
        params,
        &cache.scale,
        rbar,
        &[],
        grad,
        abar,
        &mut [],
    );
    mlp_backward(
        &layer.shift,
        params,
        &cache.shift,
        tbar,
        &[],
        grad,
        abar,
        &mut [],
    );
    for (pi, &p) in layer.pass.iter().enumerate() {
        xbar[p] += abar[pi];
    }
}

/// Everything the backward sweep needs for one point under one chart.
pub(crate) struct PointCache {
    h_inv: Vec<InverseCache>,
    g_inv: Vec<InverseCache>,
    h_fwd: Vec<ForwardCache>,
    u: Vec<f64>,
    x: Vec<f64>,
    x_rec: Vec<f64>,
    /// Columns of `J_h̃`, one per latent direction.
    jac: Vec<f64>,
    gram_inv: DMatrix<f64>,
    pub log_q: f64,
    pub residual: f64,
    with_density: bool,
}

impl PointCache {
    /// `h̃(h̃†(x))`.
    pub(crate) fn reconstruction(&self) -> &[f64] {
        &self.x_rec
    }
}

/// Forward sweep. With `with_density == false` only the reconstruction is
/// computed (`log_q` is then NaN).
pub(crate) fn forward(flow: &ChartFlow, x: &[f64], with_density: bool) -> Result<PointCache> {
    let params = &flow.params;
    let cfg = &flow.layout.config;
    let (d, big_d, s_max) = (cfg.latent_dim, cfg.ambient_dim, cfg.s_max);

    let mut y = x.to_vec();
    let mut h_inv = Vec::with_capacity(flow.layout.h.len());
    for layer in flow.layout.h.iter().rev() {
        h_inv.push(coupling_inverse(layer, params, s_max, &mut y).1);
    }
    let z: Vec<f64> = y[..d].to_vec();

    let mut g_inv = Vec::new();
    let mut u = Vec::new();
    let mut logdet_g = 0.0;
    if with_density {
        u = z.clone();
        for layer in flow.layout.g.iter().rev() {
            let (ld, c) = coupling_inverse(layer, params, s_max, &mut u);
            logdet_g += ld;
            g_inv.push(c);
        }
    }

    let k = if with_density { d } else { 0 };
    let mut p = z.clone();
    p.resize(big_d, 0.0);
    let mut pdot = vec![0.0; k * big_d];
    for j in 0..k {
        pdot[j * big_d + j] = 1.0;
    }
    let mut h_fwd = Vec::with_capacity(flow.layout.h.len());
    for layer in &flow.layout.h {
        h_fwd.push(coupling_forward(layer, params, s_max, &mut p, &mut pdot, k));
    }
    let residual: f64 = x.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();

    let mut gram_inv = DMatrix::zeros(0, 0);
    let mut log_q = f64::NAN;
    if with_density {
        let jm = DMatrix::from_column_slice(big_d, d, &pdot);
        let gram = jm.transpose() * &jm;
        let chol = gram.cholesky().ok_or(Error::SingularMetric {
            context: "training objective",
        })?;
        let half_logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        gram_inv = chol.inverse();
        let uu: f64 = u.iter().map(|a| a * a).sum();
        log_q = -0.5 * uu - 0.5 * d as f64 * LOG_2PI - logdet_g - half_logdet;
    }
    if !residual.is_finite() || (with_density && !log_q.is_finite()) {
        return Err(Error::numerical("training objective", "non-finite value"));
    }
    Ok(PointCache {
        h_inv,
        g_inv,
        h_fwd,
        u,
        x: x.to_vec(),
        x_rec: p,
        jac: pdot,
        gram_inv,
        log_q,
        residual,
        with_density,
    })
}

/// Accumulates `∂(a·log_q + b·residual)/∂θ` into `grad`.
pub(crate) fn backward(flow: &ChartFlow, cache: &PointCache, a: f64, b: f64, grad: &mut [f64]) {
    let params = &flow.params;
    let cfg = &flow.layout.config;
    let (d, big_d, s_max) = (cfg.latent_dim, cfg.ambient_dim, cfg.s_max);
    let a = if cache.with_density { a } else { 0.0 };
    let k = if cache.with_density { d } else { 0 };

    let mut ybar: Vec<f64> = cache
        .x_rec
        .iter()
        .zip(&cache.x)
        .map(|(r, x)| 2.0 * b * (r - x))
        .collect();
    // adjoint of ½ log det(JᵀJ) w.r.t. J is J G⁻¹
    let mut ydotbar = vec![0.0; k * big_d];
    if a != 0.0 {
        for j in 0..k {
            for i in 0..k {
                let w = -a * cache.gram_inv[(i, j)];
                for r in 0..big_d {
                    ydotbar[j * big_d + r] += w * cache.jac[i * big_d + r];
                }
            }
        }
    }
    for (layer, c) in flow.layout.h.iter().zip(&cache.h_fwd).rev() {
        coupling_forward_backward(layer, params, s_max, c, &mut ybar, &mut ydotbar, grad);
    }
    let mut zbar: Vec<f64> = ybar[..d].to_vec();

    if a != 0.0 {
        let mut ubar: Vec<f64> = cache.u.iter().map(|u| -a * u).collect();
        let lbar = -a;
        let layers: Vec<&CouplingLayer> = flow.layout.g.iter().rev().collect();
        for (layer, c) in layers.iter().zip(&cache.g_inv).rev() {
            coupling_inverse_backward(layer, params, s_max, c, &mut ubar, lbar, grad);
        }
        for (zb, ub) in zbar.iter_mut().zip(&ubar) {
            *zb += ub;
        }
    }

    let mut xbar = zbar;
    xbar.resize(big_d, 0.0);
    let layers: Vec<&CouplingLayer> = flow.layout.h.iter().rev().collect();
    for (layer, c) in layers.iter().zip(&cache.h_inv).rev() {
        coupling_inverse_backward(layer, params, s_max, c, &mut xbar, 0.0, grad);
    }
}

/// Inverse coupling carrying `k` tangent columns (no cache, no logdet).
fn coupling_inverse_tangent(
    layer: &CouplingLayer,
    params: &[f64],
    s_max: f64,
    y: &mut [f64],
    ydot: &mut [f64],
    k: usize,
) {
    let n = layer.dim;
    let nq = layer.transform.len();
    let np = layer.pass.len();
    let mut a = Vec::with_capacity(np * (1 + k));
    gather_into(y, n, 1, &layer.pass, &mut a);
    gather_into(ydot, n, k, &layer.pass, &mut a);
    let scale = mlp_forward(&layer.scale, params, &a[..np], &a[np..], k);
    let shift = mlp_forward(&layer.shift, params, &a[..np], &a[np..], k);
    let (r, rdot) = (scale.out(), scale.odot());
    let (t, tdot) = (shift.out(), shift.odot());
    for (qi, &q) in layer.transform.iter().enumerate() {
        let tau = fast_tanh(r[qi]);
        let ds = s_max * (1.0 - tau * tau);
        let einv = (-s_max * tau).exp();
        let xq = (y[q] - t[qi]) * einv;
        y[q] = xq;
        for j in 0..k {
            let sd = ds * rdot[j * nq + qi];
            let v = &mut ydot[j * n + q];
            *v = (*v - tdot[j * nq + qi]) * einv - xq * sd;
        }
    }
}

/// Surface projection `P(x) = h̃(h̃†(x))` and its `D×D` Jacobian, stored
/// column-major (column `j` is `∂P/∂x_j`).
pub(crate) fn project_with_jacobian(flow: &ChartFlow, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let params = &flow.params;
    let cfg = &flow.layout.config;
    let (d, n, s_max) = (cfg.latent_dim, cfg.ambient_dim, cfg.s_max);
    let mut y = x.to_vec();
    let mut ydot = vec![0.0; n * n];
    for j in 0..n {
        ydot[j * n + j] = 1.0;
    }
    for layer in flow.layout.h.iter().rev() {
        coupling_inverse_tangent(layer, params, s_max, &mut y, &mut ydot, n);
    }
    for v in &mut y[d..] {
        *v = 0.0;
    }
    for j in 0..n {
        for v in &mut ydot[j * n + d..(j + 1) * n] {
            *v = 0.0;
        }
    }
    for layer in &flow.layout.h {
        coupling_forward(layer, params, s_max, &mut y, &mut ydot, n);
    }
    if y.iter().chain(&ydot).any(|v| !v.is_finite()) {
        return Err(Error::numerical("surface projection", "non-finite value"));
    }
    Ok((y, ydot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowConfig;

    fn flow(d: usize, big_d: usize, seed: u64) -> ChartFlow {
        let cfg = FlowConfig {
            latent_dim: d,
            ambient_dim: big_d,
            g_layers: 2,
            h_layers: 3,
            hidden: 5,
            s_max: 2.0,
        };
        let mut f = ChartFlow::new(cfg, seed).unwrap();
        f.randomize(0.35, seed + 1);
        f
    }

    fn objective(f: &ChartFlow, x: &[f64], a: f64, b: f64) -> f64 {
        let t = f.density_terms(x).unwrap();
        a * t.log_density() + b * t.residual
    }

    fn check(d: usize, big_d: usize, seed: u64, x: &[f64], a: f64, b: f64) {
        let f = flow(d, big_d, seed);
        let cache = forward(&f, x, true).unwrap();
        let direct = f.density_terms(x).unwrap();
        assert!((cache.log_q - direct.log_density()).abs() < 1e-10);
        assert!((cache.residual - direct.residual).abs() < 1e-12);
        let mut grad = vec![0.0; f.n_params()];
        backward(&f, &cache, a, b, &mut grad);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..f.n_params() {
            let mut fp = f.clone();
            fp.params[i] += h;
            let mut fm = f.clone();
            fm.params[i] -= h;
            let fd = (objective(&fp, x, a, b) - objective(&fm, x, a, b)) / (2.0 * h);
            let scale = 1.0 + fd.abs();
            worst = worst.max((fd - grad[i]).abs() / scale);
        }
        assert!(worst < 1e-6, "d={d} D={big_d}: relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check(2, 3, 1, &[0.3, -0.4, 0.5], 1.0, 0.0);
        check(2, 3, 2, &[0.3, -0.4, 0.5], 0.0, 1.0);
        check(2, 3, 3, &[-0.2, 0.7, 0.1], -0.7, 3.0);
        check(1, 2, 4, &[0.8, -0.3], -1.0, 10.0);
        check(2, 2, 5, &[0.1, 0.2], -1.0, 0.0);
        check(3, 4, 6, &[0.1, 0.2, -0.3, 0.4], 0.5, 2.0);
    }

    #[test]
    fn reconstruction_only_gradient() {
        let f = flow(2, 3, 9);
        let x = [0.4, 0.1, -0.6];
        let cache = forward(&f, &x, false).unwrap();
        assert!(cache.log_q.is_nan());
        let mut grad = vec![0.0; f.n_params()];
        backward(&f, &cache, 0.0, 1.0, &mut grad);
        let full = forward(&f, &x, true).unwrap();
        let mut grad_full = vec![0.0; f.n_params()];
        backward(&f, &full, 0.0, 1.0, &mut grad_full);
        for (a, b) in grad.iter().zip(&grad_full) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(grad[..f.layout.g_end].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn projection_jacobian_matches_forward_mode() {
        for (d, big_d, seed) in [(1, 2, 11), (2, 3, 12), (2, 2, 13), (3, 4, 14)] {
            let f = flow(d, big_d, seed);
            let x: Vec<f64> = (0..big_d).map(|i| 0.3 * (i as f64 + 1.0).sin()).collect();
            let (p, jp) = project_with_jacobian(&f, &x).unwrap();
            let (p_ref, j_ref) =
                crate::autodiff::value_and_jacobian(&crate::flows::SurfaceProjection(&f), &x)
                    .unwrap();
            for i in 0..big_d {
                assert!((p[i] - p_ref[i]).abs() < 1e-12);
                for j in 0..big_d {
                    assert!((jp[j * big_d + i] - j_ref[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }
}
