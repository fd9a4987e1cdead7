use super::dual::Dual;
use super::{check_open_unit, QuantileFn};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

/// How `(0,1)` is mapped into the spline input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `psi(u) = logit(u)`; the linear tails are reached for `|logit u| > B`.
    Logit,
    /// `psi(u) = B (2u - 1)`; stays inside the knot interval.
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RqsConfig {
    pub bins: usize,
    pub bound: f64,
    pub layers: usize,
    pub activation: Activation,
    pub min_width: f64,
    pub min_height: f64,
    pub min_slope: f64,
}

impl Default for RqsConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            bound: 5.0,
            layers: 3,
            activation: Activation::Affine,
            min_width: 1e-3,
            min_height: 1e-3,
            min_slope: 1e-5,
        }
    }
}

impl RqsConfig {
    /// One logit layer with a wide knot interval, for heavy-tailed targets.
    pub fn heavy_tailed() -> Self {
        Self { bound: 500.0, layers: 1, activation: Activation::Logit, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.bins as f64;
        let bad = |m: &str| Err(Error::Config(format!("rqs: {m}")));
        if self.bins == 0 || self.layers == 0 {
            return bad("bins and layers must be positive");
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return bad("bound must be positive");
        }
        if !(self.min_width > 0.0 && self.min_width * k < 1.0) {
            return bad("min_width * bins must lie in (0, 1)");
        }
        if !(self.min_height > 0.0 && self.min_height * k < 1.0) {
            return bad("min_height * bins must lie in (0, 1)");
        }
        if !(self.min_slope > 0.0 && self.min_slope < 1.0) {
            return bad("min_slope must lie in (0, 1)");
        }
        Ok(())
    }

    /// Raw parameters per spline layer: widths, heights, knot slopes, range.
    pub fn layer_len(&self) -> usize {
        3 * self.bins + 2
    }

    /// Total raw parameters, including the affine head.
    pub fn n_params(&self) -> usize {
        self.layers * self.layer_len() + 2
    }
}

/// Monotone rational-quadratic spline quantile for one coordinate:
/// `Q(u) = s * S_L(...S_1(psi(u))) + b` with `s = softplus(raw_s)`.
///
/// Parameter layout, per layer: `K` raw widths, `K` raw heights, `K + 1` raw
/// knot slopes (entries 0 and K double as the tail slopes), one raw range.
/// The head `[raw_s, b]` comes last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqsQuantile {
    pub config: RqsConfig,
    pub params: Vec<f64>,
}

/// Knots of one layer, derived from raw parameters.
#[derive(Debug, Clone)]
pub(crate) struct Knots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ds: Vec<f64>,
    pub ws: Vec<f64>,
    pub hs: Vec<f64>,
    pub span: f64,
}

/// Adjoints of one layer's knot quantities.
#[derive(Debug, Clone)]
struct KnotGrad {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
    ws: Vec<f64>,
    hs: Vec<f64>,
}

impl KnotGrad {
    fn zeros(k: usize) -> Self {
        Self {
            xs: vec![0.0; k + 1],
            ys: vec![0.0; k + 1],
            ds: vec![0.0; k + 1],
            ws: vec![0.0; k],
            hs: vec![0.0; k],
        }
    }
}

/// Value and log-derivative of one layer at `x`, plus the local partials.
struct LayerEval {
    logd: f64,
    /// `(d y, d logd)` with respect to `x`.
    dx: (f64, f64),
}

/// Bin geometry of a single rational-quadratic piece, generic over dual numbers.
/// Inputs in order: x, x_k, w_k, y_k, h_k, d_k, d_{k+1}.
fn rq_piece(v: [Dual<7>; 7]) -> (Dual<7>, Dual<7>) {
    let [x, xk, wk, yk, hk, dk, dk1] = v;
    let one = Dual::cst(1.0);
    let xi = (x - xk) / wk;
    let s = hk / wk;
    let om = one - xi;
    let t = xi * om;
    let den = s + (dk1 + dk - s.scale(2.0)) * t;
    let y = yk + hk * (s * xi * xi + dk * t) / den;
    let num = s * s * (dk1 * xi * xi + (s * t).scale(2.0) + dk * om * om);
    let logd = num.ln() - den.ln().scale(2.0);
    (y, logd)
}

fn rq_piece_value(x: f64, xk: f64, wk: f64, yk: f64, hk: f64, dk: f64, dk1: f64) -> (f64, f64) {
    let xi = (x - xk) / wk;
    let s = hk / wk;
    let om = 1.0 - xi;
    let t = xi * om;
    let den = s + (dk1 + dk - 2.0 * s) * t;
    let y = yk + hk * (s * xi * xi + dk * t) / den;
    let num = s * s * (dk1 * xi * xi + 2.0 * s * t + dk * om * om);
    (y, num.ln() - 2.0 * den.ln())
}

impl Knots {
    fn bins(&self) -> usize {
        self.ws.len()
    }

    /// Bin index for x inside `[x_0, x_K]`, `None` in the tails.
    fn locate(&self, x: f64) -> Option<usize> {
        let k = self.bins();
        if x < self.xs[0] || x > self.xs[k] {
            return None;
        }
        let i = self.xs.partition_point(|&knot| knot <= x);
        Some(i.saturating_sub(1).min(k - 1))
    }

    fn eval(&self, x: f64) -> (f64, f64) {
        let k = self.bins();
        match self.locate(x) {
            None if x < self.xs[0] => (self.ys[0] + self.ds[0] * (x - self.xs[0]), self.ds[0].ln()),
            None => (self.ys[k] + self.ds[k] * (x - self.xs[k]), self.ds[k].ln()),
            Some(b) => rq_piece_value(
                x,
                self.xs[b],
                self.ws[b],
                self.ys[b],
                self.hs[b],
                self.ds[b],
                self.ds[b + 1],
            ),
        }
    }

    /// Evaluate and accumulate `gy * dy/dknots + gl * dlogd/dknots` into `g`.
    /// Returns the partials with respect to x.
    fn eval_with_grad(&self, x: f64, gy: f64, gl: f64, g: &mut KnotGrad) -> LayerEval {
        let k = self.bins();
        match self.locate(x) {
            None => {
                let i = if x < self.xs[0] { 0 } else { k };
                let d = self.ds[i];
                let dx = x - self.xs[i];
                g.ys[i] += gy;
                g.xs[i] -= gy * d;
                g.ds[i] += gy * dx + gl / d;
                LayerEval { logd: d.ln(), dx: (d, 0.0) }
            }
            Some(b) => {
                let vars = [
                    Dual::var(x, 0),
                    Dual::var(self.xs[b], 1),
                    Dual::var(self.ws[b], 2),
                    Dual::var(self.ys[b], 3),
                    Dual::var(self.hs[b], 4),
                    Dual::var(self.ds[b], 5),
                    Dual::var(self.ds[b + 1], 6),
                ];
                let (y, l) = rq_piece(vars);
                let c = |i: usize| gy * y.d[i] + gl * l.d[i];
                g.xs[b] += c(1);
                g.ws[b] += c(2);
                g.ys[b] += c(3);
                g.hs[b] += c(4);
                g.ds[b] += c(5);
                g.ds[b + 1] += c(6);
                LayerEval { logd: l.v, dx: (y.d[0], l.d[0]) }
            }
        }
    }

    /// Inverse of the layer map. Exact on the tails, quadratic formula inside.
    fn inverse(&self, y: f64) -> f64 {
        let k = self.bins();
        if y < self.ys[0] {
            return self.xs[0] + (y - self.ys[0]) / self.ds[0];
        }
        if y > self.ys[k] {
            return self.xs[k] + (y - self.ys[k]) / self.ds[k];
        }
        let i = self.ys.partition_point(|&knot| knot <= y);
        let b = i.saturating_sub(1).min(k - 1);
        let (xk, wk, yk, hk, dk, dk1) =
            (self.xs[b], self.ws[b], self.ys[b], self.hs[b], self.ds[b], self.ds[b + 1]);
        let s = hk / wk;
        let dy = y - yk;
        let m = dk1 + dk - 2.0 * s;
        let qa = hk * (s - dk) + dy * m;
        let qb = hk * dk - dy * m;
        let qc = -s * dy;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let xi = if qc == 0.0 { 0.0 } else { 2.0 * qc / (-qb - disc.sqrt()) };
        xk + xi.clamp(0.0, 1.0) * wk
    }
}

impl RqsQuantile {
    /// Identity-like initialisation: equal bins, unit knot slopes, range
    /// span `2B`, head `(s, b) = (1, 0)`.
    pub fn new(config: RqsConfig) -> Result<Self> {
        config.validate()?;
        let k = config.bins;
        let slope_raw = (1.0 - config.min_slope).exp_m1().ln();
        let mut params = Vec::with_capacity(config.n_params());
        for _ in 0..config.layers {
            params.extend(std::iter::repeat_n(0.0, 2 * k));
            params.extend(std::iter::repeat_n(slope_raw, k + 1));
            params.push(0.0);
        }
        params.push((std::f64::consts::E - 1.0).ln());
        params.push(0.0);
        Ok(Self { config, params })
    }

    pub fn from_params(config: RqsConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::shape(
                "RqsQuantile::from_params",
                format!("expected {} parameters, got {}", config.n_params(), params.len()),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn head_scale(&self) -> f64 {
        softplus(self.params[self.params.len() - 2])
    }

    pub fn head_bias(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Set the affine head to `(s, b)`.
    pub fn set_head(&mut self, s: f64, b: f64) {
        let n = self.params.len();
        self.params[n - 2] = crate::numerics::softplus_inv(s);
        self.params[n - 1] = b;
    }

    fn layer_raw(&self, l: usize) -> &[f64] {
        let len = self.config.layer_len();
        &self.params[l * len..(l + 1) * len]
    }

    pub(crate) fn knots(&self, l: usize) -> Knots {
        let c = &self.config;
        let k = c.bins;
        let raw = self.layer_raw(l);
        let (aw, rest) = raw.split_at(k);
        let (ah, rest) = rest.split_at(k);
        let (ad, ar) = rest.split_at(k + 1);
        let two_b = 2.0 * c.bound;
        let span = two_b * softplus(ar[0]) / LN_2;
        let ws = normalised(aw, c.min_width, two_b);
        let hs = normalised(ah, c.min_height, span);
        let mut xs = Vec::with_capacity(k + 1);
        let mut ys = Vec::with_capacity(k + 1);
        xs.push(-c.bound);
        ys.push(-0.5 * span);
        for j in 0..k {
            xs.push(xs[j] + ws[j]);
            ys.push(ys[j] + hs[j]);
        }
        xs[k] = c.bound;
        ys[k] = 0.5 * span;
        let ds = ad.iter().map(|&a| c.min_slope + softplus(a)).collect();
        Knots { xs, ys, ds, ws, hs, span }
    }

    pub(crate) fn all_knots(&self) -> Vec<Knots> {
        (0..self.config.layers).map(|l| self.knots(l)).collect()
    }

    fn psi(&self, u: f64) -> (f64, f64) {
        match self.config.activation {
            Activation::Logit => ((u / (1.0 - u)).ln(), -(u.ln() + (-u).ln_1p())),
            Activation::Affine => (self.config.bound * (2.0 * u - 1.0), (2.0 * self.config.bound).ln()),
        }
    }

    fn psi_inv(&self, x: f64) -> Result<f64> {
        match self.config.activation {
            Activation::Logit => Ok(sigmoid(x)),
            Activation::Affine => {
                let u = 0.5 * (x / self.config.bound + 1.0);
                if u > 0.0 && u < 1.0 {
                    Ok(u)
                } else {
                    Err(Error::domain("rqs_inverse", format!("spline preimage {x} outside the affine window")))
                }
            }
        }
    }

    /// `(Q(u), log Q'(u))` using precomputed knots.
    pub(crate) fn eval_with(&self, knots: &[Knots], u: f64) -> Result<(f64, f64)> {
        check_open_unit("rqs_eval", u)?;
        let (mut x, mut logd) = self.psi(u);
        for kn in knots {
            let (y, l) = kn.eval(x);
            x = y;
            logd += l;
        }
        let s = self.head_scale();
        Ok((s * x + self.head_bias(), logd + s.ln()))
    }

    /// Value and log-derivative; add `gq * dQ/dparams + gl * dlogQ'/dparams`
    /// into `grad`.
    pub(crate) fn eval_and_backprop(
        &self,
        knots: &[Knots],
        u: f64,
        gq: f64,
        gl: f64,
        kg: &mut [KnotGradBuf],
        head: &mut [f64; 2],
    ) -> Result<(f64, f64)> {
        check_open_unit("rqs_eval", u)?;
        let (x0, lpsi) = self.psi(u);
        let mut xs_in = Vec::with_capacity(knots.len());
        let mut x = x0;
        for kn in knots {
            xs_in.push(x);
            x = kn.eval(x).0;
        }
        let s = self.head_scale();
        let raw_s = self.params[self.params.len() - 2];
        head[0] += (gq * x + gl / s) * sigmoid(raw_s);
        head[1] += gq;
        let mut gx = gq * s;
        let mut logd = lpsi + s.ln();
        for l in (0..knots.len()).rev() {
            let e = knots[l].eval_with_grad(xs_in[l], gx, gl, &mut kg[l].0);
            logd += e.logd;
            gx = gx * e.dx.0 + gl * e.dx.1;
        }
        Ok((s * x + self.head_bias(), logd))
    }

    pub(crate) fn new_grad_bufs(&self) -> Vec<KnotGradBuf> {
        (0..self.config.layers).map(|_| KnotGradBuf(KnotGrad::zeros(self.config.bins))).collect()
    }

    /// Map accumulated knot adjoints back to raw parameters.
    pub(crate) fn finish_grad(&self, knots: &[Knots], kg: &[KnotGradBuf], head: [f64; 2], out: &mut [f64]) {
        let c = &self.config;
        let k = c.bins;
        let len = c.layer_len();
        for l in 0..c.layers {
            let kn = &knots[l];
            let g = &kg[l].0;
            let raw = self.layer_raw(l);
            let (aw, rest) = raw.split_at(k);
            let (ah, rest) = rest.split_at(k);
            let (ad, ar) = rest.split_at(k + 1);
            let o = &mut out[l * len..(l + 1) * len];

            // Cumulative sums: x_i = x_0 + sum_{j<i} w_j, likewise for y.
            let mut gw = g.ws.clone();
            let mut gh = g.hs.clone();
            let mut tail_x = 0.0;
            let mut tail_y = 0.0;
            for j in (0..k).rev() {
                tail_x += g.xs[j + 1];
                tail_y += g.ys[j + 1];
                gw[j] += tail_x;
                gh[j] += tail_y;
            }
            let gy0: f64 = g.ys.iter().sum();

            let two_b = 2.0 * c.bound;
            normalised_backprop(aw, c.min_width, two_b, &gw, &mut o[..k]);
            let gspan_h = normalised_backprop(ah, c.min_height, kn.span, &gh, &mut o[k..2 * k]);
            for j in 0..=k {
                o[2 * k + j] += g.ds[j] * sigmoid(ad[j]);
            }
            let gspan = gspan_h - 0.5 * gy0;
            o[3 * k + 1] += gspan * two_b * sigmoid(ar[0]) / LN_2;
        }
        let n = out.len();
        out[n - 2] += head[0];
        out[n - 1] += head[1];
    }

    /// `(Q(u), log Q'(u))`.
    pub fn eval_logd(&self, u: f64) -> Result<(f64, f64)> {
        self.eval_with(&self.all_knots(), u)
    }

    /// Gradients of `sum_i gq_i Q(u_i) + gl_i log Q'(u_i)` with respect to the
    /// raw parameters.
    pub fn grad(&self, us: &[f64], gq: &[f64], gl: &[f64]) -> Result<Vec<f64>> {
        let knots = self.all_knots();
        let mut kg = self.new_grad_bufs();
        let mut head = [0.0; 2];
        for i in 0..us.len() {
            self.eval_and_backprop(&knots, us[i], gq[i], gl[i], &mut kg, &mut head)?;
        }
        let mut out = vec![0.0; self.params.len()];
        self.finish_grad(&knots, &kg, head, &mut out);
        Ok(out)
    }

    pub(crate) fn inverse_with(&self, knots: &[Knots], x: f64) -> Result<f64> {
        let mut y = (x - self.head_bias()) / self.head_scale();
        for kn in knots.iter().rev() {
            y = kn.inverse(y);
        }
        self.psi_inv(y)
    }
}

/// Opaque per-layer adjoint buffer.
#[derive(Debug, Clone)]
pub(crate) struct KnotGradBuf(KnotGrad);

/// `total * (m + (1 - K m) softplus(a_j) / sum softplus(a))`.
fn normalised(a: &[f64], m: f64, total: f64) -> Vec<f64> {
    let sp: Vec<f64> = a.iter().map(|&v| softplus(v)).collect();
    let sum: f64 = sp.iter().sum();
    let free = 1.0 - a.len() as f64 * m;
    sp.iter().map(|&v| total * (m + free * v / sum)).collect()
}

/// Backprop of `normalised`. Writes raw gradients into `out` and returns the
/// gradient with respect to `total`.
fn normalised_backprop(a: &[f64], m: f64, total: f64, g: &[f64], out: &mut [f64]) -> f64 {
    let sp: Vec<f64> = a.iter().map(|&v| softplus(v)).collect();
    let sum: f64 = sp.iter().sum();
    let free = 1.0 - a.len() as f64 * m;
    let mut gtotal = 0.0;
    let mut gsig = Vec::with_capacity(a.len());
    let mut dot = 0.0;
    for j in 0..a.len() {
        let sig = sp[j] / sum;
        gtotal += g[j] * (m + free * sig);
        let gs = g[j] * total * free;
        dot += gs * sig;
        gsig.push(gs);
    }
    for j in 0..a.len() {
        out[j] += (gsig[j] - dot) / sum * sigmoid(a[j]);
    }
    gtotal
}

impl QuantileFn for RqsQuantile {
    fn eval(&self, p: f64) -> Result<f64> {
        Ok(self.eval_logd(p)?.0)
    }

    fn deriv(&self, p: f64) -> Result<f64> {
        Ok(self.eval_logd(p)?.1.exp())
    }

    fn inverse(&self, x: f64) -> Result<f64> {
        self.inverse_with(&self.all_knots(), x)
    }

    fn support(&self) -> (f64, f64) {
        match self.config.activation {
            Activation::Logit => (f64::NEG_INFINITY, f64::INFINITY),
            Activation::Affine => {
                let mut lo = -self.config.bound;
                let mut hi = self.config.bound;
                for kn in self.all_knots() {
                    lo = kn.eval(lo).0;
                    hi = kn.eval(hi).0;
                }
                let s = self.head_scale();
                (s * lo + self.head_bias(), s * hi + self.head_bias())
            }
        }
    }
}
