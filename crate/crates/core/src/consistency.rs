//! Quantile interpolants `I_{s,t}(x, y) = f(s) x + Q_{g(s)}(R_{g(t)}(y - f(t) x))`,
//! their identities, and a toy-scale inductive moment matching objective
//! built on them.

use crate::autodiff::{Adam, AdamConfig, CustomOp, Ema, MlpConfig, Tape, VelocityNet};
use crate::compose::Schedule;
use crate::error::{Error, Result};
use crate::numerics::{normal_cdf, normal_quantile, Rng};
use crate::quantile::{clamp_u, QuantileFn};
use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Clock-indexed quantile family `Q_tau`, with `Q_0 = 0`.
#[derive(Debug, Clone)]
pub enum ClockQuantile {
    /// `Q_tau(p) = sqrt(tau) Phi^{-1}(p)`, the Wiener process.
    Gaussian,
    /// `Q_tau(p) = tau Q(p)` for a fixed latent quantile.
    Scaled(Arc<dyn QuantileFn>),
}

impl ClockQuantile {
    fn scale(&self, tau: f64) -> f64 {
        match self {
            ClockQuantile::Gaussian => tau.sqrt(),
            ClockQuantile::Scaled(_) => tau,
        }
    }

    pub fn q(&self, tau: f64, p: f64) -> Result<f64> {
        if tau == 0.0 {
            return Ok(0.0);
        }
        let z = match self {
            ClockQuantile::Gaussian => normal_quantile(p)?,
            ClockQuantile::Scaled(q) => q.eval(p)?,
        };
        Ok(self.scale(tau) * z)
    }

    /// Inverse of `Q_tau` on its image.
    pub fn r(&self, tau: f64, x: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::domain("ClockQuantile::r", format!("clock {tau} has a point-mass quantile")));
        }
        let z = x / self.scale(tau);
        match self {
            ClockQuantile::Gaussian => {
                let p = normal_cdf(z);
                if p > 0.0 && p < 1.0 {
                    Ok(p)
                } else {
                    Err(Error::domain("ClockQuantile::r", format!("{x} outside the numerical image at clock {tau}")))
                }
            }
            ClockQuantile::Scaled(q) => {
                let (lo, hi) = q.support();
                if !(z > lo && z < hi) {
                    return Err(Error::domain("ClockQuantile::r", format!("{x} outside the image ({}, {})", lo * tau, hi * tau)));
                }
                q.inverse(z)
            }
        }
    }

    /// `Q_{gs}(R_{gt}(w))`. The Gaussian case is evaluated on the lower tail
    /// so both signs keep full precision.
    pub fn transfer(&self, gs: f64, gt: f64, w: f64) -> Result<f64> {
        if gs == 0.0 {
            return Ok(0.0);
        }
        match self {
            ClockQuantile::Gaussian => {
                if !(gt > 0.0) {
                    return Err(Error::domain("ClockQuantile::transfer", format!("clock {gt} has a point-mass quantile")));
                }
                let z = w / gt.sqrt();
                let p = normal_cdf(-z.abs());
                // Past the underflow of Phi the round trip is the identity.
                let back = if p > 0.0 { -normal_quantile(p)? * z.signum() } else { z };
                Ok(gs.sqrt() * back)
            }
            ClockQuantile::Scaled(_) => self.q(gs, self.r(gt, w)?),
        }
    }
}

/// A flow `X_t = f(t) X_0 + Q_{g(t)}(U)` described through its quantiles.
#[derive(Debug, Clone)]
pub struct QuantileFlow {
    pub schedule: Schedule,
    pub noise: ClockQuantile,
}

/// Draw of the quantile process with the uniform behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessDraw {
    pub t: f64,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
}

impl QuantileFlow {
    pub fn gaussian(schedule: Schedule) -> Self {
        Self { schedule, noise: ClockQuantile::Gaussian }
    }

    pub fn scaled(schedule: Schedule, q: Arc<dyn QuantileFn>) -> Self {
        Self { schedule, noise: ClockQuantile::Scaled(q) }
    }

    /// `I_{s,t}(x, y)` for one coordinate.
    pub fn interpolant(&self, s: f64, t: f64, x: f64, y: f64) -> Result<f64> {
        let sch = &self.schedule;
        let gs = sch.g(s);
        if gs == 0.0 {
            return Ok(sch.f(s) * x);
        }
        Ok(sch.f(s) * x + self.noise.transfer(gs, sch.g(t), y - sch.f(t) * x)?)
    }

    pub fn interpolant_vec(&self, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        x.iter().zip(y).map(|(&a, &b)| self.interpolant(s, t, a, b)).collect()
    }

    /// `|I_{s,r}(x, I_{r,t}(x, y)) - I_{s,t}(x, y)|`.
    pub fn check_semigroup(&self, s: f64, r: f64, t: f64, x: f64, y: f64) -> Result<f64> {
        let inner = self.interpolant(r, t, x, y)?;
        Ok((self.interpolant(s, r, x, inner)? - self.interpolant(s, t, x, y)?).abs())
    }

    /// `z_t = f(t) x0 + Q_{g(t)}(u)` with the uniform recorded.
    pub fn sample_process(&self, x0: &[f64], t: f64, rng: &mut Rng) -> Result<ProcessDraw> {
        let u: Vec<f64> = x0.iter().map(|_| clamp_u(rng.uniform())).collect();
        let z = self.at_uniform(x0, t, &u)?;
        Ok(ProcessDraw { t, u, z })
    }

    fn at_uniform(&self, x0: &[f64], t: f64, u: &[f64]) -> Result<Vec<f64>> {
        let (f, g) = (self.schedule.f(t), self.schedule.g(t));
        x0.iter().zip(u).map(|(&x, &p)| Ok(f * x + self.noise.q(g, p)?)).collect()
    }

    /// `I_{s,t}(z0, z_t)`, which equals `f(s) z0 + Q_{g(s)}(u)` for the
    /// recorded `u`.
    pub fn interpolate_process(&self, z0: &[f64], draw: &ProcessDraw, s: f64) -> Result<Vec<f64>> {
        self.interpolant_vec(s, draw.t, z0, &draw.z)
    }

    /// `kappa` with `Q_{g(s)}(R_{g(t)}(w)) = kappa w`, which holds for both
    /// quantile families here.
    pub fn transfer_ratio(&self, s: f64, t: f64) -> Result<f64> {
        let (gs, gt) = (self.schedule.g(s), self.schedule.g(t));
        if gs == 0.0 {
            return Ok(0.0);
        }
        if !(gt > 0.0) {
            return Err(Error::domain("transfer_ratio", format!("g({t}) = {gt} with g({s}) = {gs} > 0")));
        }
        Ok(self.noise.scale(gs) / self.noise.scale(gt))
    }
}

/// The DDIM update `((1 - s) - (s/t)(1 - t)) x + (s/t) y`.
pub fn ddim_closed_form(s: f64, t: f64, x: f64, y: f64) -> f64 {
    ((1.0 - s) - (s / t) * (1.0 - t)) * x + (s / t) * y
}

fn pairwise_distance(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    })
}

/// Median of the pooled pairwise distances (excluding the diagonal).
pub fn median_bandwidth(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let pooled = concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
    let n = pooled.nrows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let dist = pairwise_distance(&pooled, &pooled);
    for i in 0..n {
        for j in i + 1..n {
            d.push(dist[[i, j]]);
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased (V-statistic) squared MMD under the Laplace kernel
/// `exp(-||x - y|| / h)`.
pub fn laplace_mmd_sq(a: &Array2<f64>, b: &Array2<f64>, h: f64) -> f64 {
    let k = |m: Array2<f64>| m.mapv(|d| (-d / h).exp()).mean().unwrap_or(0.0);
    k(pairwise_distance(a, a)) + k(pairwise_distance(b, b)) - 2.0 * k(pairwise_distance(a, b))
}

/// Laplace MMD with the first group differentiable.
#[derive(Debug)]
struct MmdOp {
    other: Array2<f64>,
    h: f64,
}

impl CustomOp for MmdOp {
    fn backward(&self, inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>) -> Result<Vec<Option<Array2<f64>>>> {
        let a = inputs[0];
        let (m, n) = (a.nrows() as f64, self.other.nrows() as f64);
        let g = grad[[0, 0]];
        let mut out = Array2::zeros(a.dim());
        // d/da of exp(-|a - c| / h) is -k (a - c) / (h |a - c|).
        let mut add = |i: usize, c: ndarray::ArrayView1<f64>, w: f64| {
            let diff = &a.row(i) - &c;
            let dist = diff.dot(&diff).sqrt();
            if dist > 0.0 {
                let k = (-dist / self.h).exp();
                out.row_mut(i).scaled_add(-w * k / (self.h * dist), &diff);
            }
        };
        for i in 0..a.nrows() {
            for j in 0..a.nrows() {
                // Each unordered pair appears twice in the double sum.
                add(i, a.row(j), 2.0 * g / (m * m));
            }
            for j in 0..self.other.nrows() {
                add(i, self.other.row(j), -2.0 * g / (m * n));
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Configuration of the toy inductive moment matching runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImmConfig {
    /// Bootstrap gap: `r = max(s, t - eps)`.
    pub eps: f64,
    /// Particles per `(s, t)` group.
    pub particles: usize,
    /// Groups per optimisation step.
    pub groups: usize,
    /// Lower bound on the clock factor that scales the median bandwidth.
    pub bandwidth_floor: f64,
    pub lr: f64,
    /// Decay of the EMA copy that plays the previous iterate.
    pub ema_decay: f64,
    pub hidden: Vec<usize>,
    pub time_embedding: usize,
    /// Sampling grid `1 = t_0 > ... > t_T`.
    pub grid: Vec<f64>,
}

impl Default for ImmConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            particles: 32,
            groups: 4,
            bandwidth_floor: 0.05,
            lr: 1e-3,
            ema_decay: 0.99,
            hidden: vec![64, 64],
            time_embedding: 8,
            grid: vec![1.0, 0.5, 0.0],
        }
    }
}

impl ImmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("IMM eps must be positive, got {}", self.eps)));
        }
        if self.particles == 0 || self.groups == 0 {
            return Err(Error::Config("IMM needs at least one group of one particle".into()));
        }
        if !(self.bandwidth_floor > 0.0) {
            return Err(Error::Config("bandwidth floor must be positive".into()));
        }
        if self.grid.len() < 2 || self.grid[0] != 1.0 || self.grid.windows(2).any(|w| !(w[1] < w[0])) || *self.grid.last().expect("len >= 2") < 0.0 {
            return Err(Error::Config(format!("IMM grid must decrease from 1 to a value >= 0, got {:?}", self.grid)));
        }
        Ok(())
    }

    /// `max(s, t - eps)`.
    pub fn bootstrap_time(&self, s: f64, t: f64) -> f64 {
        s.max(t - self.eps)
    }
}

/// Stochastic generator `(s, t, z_t, eta) -> x0_hat`.
pub trait X0Generator {
    fn predict(&self, s: f64, t: f64, z: &Array2<f64>, eta: &Array2<f64>) -> Result<Array2<f64>>;
}

/// An MLP generator reading `[z_t | eta]` and the two times `(s, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImmNet {
    pub net: VelocityNet,
}

impl ImmNet {
    pub fn new(d: usize, cfg: &ImmConfig, rng: &mut Rng) -> Result<Self> {
        let mc = MlpConfig { in_dim: 2 * d, out_dim: d, n_times: 2, hidden: cfg.hidden.clone(), time_embedding: cfg.time_embedding };
        Ok(Self { net: VelocityNet::new(mc, rng)? })
    }

    fn inputs(z: &Array2<f64>, eta: &Array2<f64>, s: f64, t: f64) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = concatenate(Axis(1), &[z.view(), eta.view()]).map_err(|e| Error::shape("ImmNet", e.to_string()))?;
        let mut times = Array2::zeros((z.nrows(), 2));
        times.column_mut(0).fill(s);
        times.column_mut(1).fill(t);
        Ok((x, times))
    }

    pub fn predict_with(&self, params: &[Array2<f64>], s: f64, t: f64, z: &Array2<f64>, eta: &Array2<f64>) -> Result<Array2<f64>> {
        let (x, times) = Self::inputs(z, eta, s, t)?;
        self.net.forward_with(params, &x, &times)
    }
}

impl X0Generator for ImmNet {
    fn predict(&self, s: f64, t: f64, z: &Array2<f64>, eta: &Array2<f64>) -> Result<Array2<f64>> {
        self.predict_with(&self.net.params, s, t, z, eta)
    }
}

/// `I_{s,t}` applied row-wise.
pub fn interpolant_batch(flow: &QuantileFlow, s: f64, t: f64, x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.dim());
    for ((o, &a), &b) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
        *o = flow.interpolant(s, t, a, b)?;
    }
    Ok(out)
}

/// Quantile-process draws `z_t` for every row of `x0`.
pub fn process_batch(flow: &QuantileFlow, x0: &Array2<f64>, t: f64, rng: &mut Rng) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x0.dim());
    for (i, row) in x0.outer_iter().enumerate() {
        let d = flow.sample_process(&row.to_vec(), t, rng)?;
        out.row_mut(i).assign(&Array1::from(d.z));
    }
    Ok(out)
}

fn gauss_batch(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.gauss())
}

fn bandwidth(flow: &QuantileFlow, cfg: &ImmConfig, t: f64, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    median_bandwidth(a, b) * flow.schedule.g(t).max(cfg.bandwidth_floor)
}

/// The two groups of the naive objective and the kernel bandwidth.
#[derive(Debug, Clone)]
pub struct NaiveGroups {
    /// True `z_s` draws from fresh data.
    pub reference: Array2<f64>,
    /// `I_{s,t}(x0_hat, z_t)`.
    pub model: Array2<f64>,
    pub bandwidth: f64,
}

pub fn imm_naive_groups<G, D>(gen: &G, flow: &QuantileFlow, data: D, s: f64, t: f64, cfg: &ImmConfig, rng: &mut Rng) -> Result<NaiveGroups>
where
    G: X0Generator,
    D: Fn(usize, &mut Rng) -> Array2<f64>,
{
    let m = cfg.particles;
    let x0 = data(m, rng);
    let zt = process_batch(flow, &x0, t, rng)?;
    let eta = gauss_batch(m, x0.ncols(), rng);
    let xhat = gen.predict(s, t, &zt, &eta)?;
    let model = interpolant_batch(flow, s, t, &xhat, &zt)?;
    let fresh = data(m, rng);
    let reference = process_batch(flow, &fresh, s, rng)?;
    let bandwidth = bandwidth(flow, cfg, t, &reference, &model);
    Ok(NaiveGroups { reference, model, bandwidth })
}

/// `MMD^2(rho_s, p_theta(s, t))`: true `z_s` draws against
/// `I_{s,t}(x0_hat, z_t)`, each group built from its own data draws.
pub fn imm_naive_loss<G, D>(gen: &G, flow: &QuantileFlow, data: D, s: f64, t: f64, cfg: &ImmConfig, rng: &mut Rng) -> Result<f64>
where
    G: X0Generator,
    D: Fn(usize, &mut Rng) -> Array2<f64>,
{
    let g = imm_naive_groups(gen, flow, data, s, t, cfg, rng)?;
    Ok(laplace_mmd_sq(&g.reference, &g.model, g.bandwidth))
}

/// Samples of the two groups compared by the general objective.
#[derive(Debug, Clone)]
pub struct ImmGroups {
    pub r: f64,
    pub z_t: Array2<f64>,
    pub eta: Array2<f64>,
    /// `I_{s,t}(p_theta(s, t, z_t), z_t)`.
    pub current: Array2<f64>,
    /// `I_{s,r}(p_prev(s, r, z_r), z_r)`.
    pub previous: Array2<f64>,
}

fn imm_groups<G, P>(current: &G, previous: &P, flow: &QuantileFlow, x0: &Array2<f64>, s: f64, t: f64, cfg: &ImmConfig, rng: &mut Rng) -> Result<ImmGroups>
where
    G: X0Generator,
    P: X0Generator,
{
    let r = cfg.bootstrap_time(s, t);
    let zt = process_batch(flow, x0, t, rng)?;
    let zr = interpolant_batch(flow, r, t, x0, &zt)?;
    let d = x0.ncols();
    let eta = gauss_batch(x0.nrows(), d, rng);
    let eta_prev = gauss_batch(x0.nrows(), d, rng);
    let cur = interpolant_batch(flow, s, t, &current.predict(s, t, &zt, &eta)?, &zt)?;
    let prev = interpolant_batch(flow, s, r, &previous.predict(s, r, &zr, &eta_prev)?, &zr)?;
    Ok(ImmGroups { r, z_t: zt, eta, current: cur, previous: prev })
}

/// `w(s, t) MMD^2(p_prev(s, r), p_theta(s, t))` with `r = max(s, t - eps)`.
pub fn imm_general_loss<G, P>(
    current: &G,
    previous: &P,
    flow: &QuantileFlow,
    x0: &Array2<f64>,
    s: f64,
    t: f64,
    weight: f64,
    cfg: &ImmConfig,
    rng: &mut Rng,
) -> Result<f64>
where
    G: X0Generator,
    P: X0Generator,
{
    if weight == 0.0 {
        return Ok(0.0);
    }
    let g = imm_groups(current, previous, flow, x0, s, t, cfg, rng)?;
    Ok(weight * laplace_mmd_sq(&g.current, &g.previous, bandwidth(flow, cfg, t, &g.current, &g.previous)))
}

/// Iterates `x0_hat ~ p(t_{k+1}, t_k, z)`, `z <- I_{t_{k+1}, t_k}(x0_hat, z)`
/// along a decreasing grid, starting from `z_1`.
pub fn imm_multistep_sample<G: X0Generator>(gen: &G, flow: &QuantileFlow, z1: &Array2<f64>, grid: &[f64], rng: &mut Rng) -> Result<Array2<f64>> {
    if grid.len() < 2 {
        return Err(Error::Config("sampling grid needs at least two times".into()));
    }
    let mut z = z1.clone();
    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        let eta = gauss_batch(z.nrows(), z.ncols(), rng);
        let xhat = gen.predict(s, t, &z, &eta)?;
        z = interpolant_batch(flow, s, t, &xhat, &z)?;
    }
    Ok(z)
}

/// Draws `z_1` for data `x0`.
pub fn terminal_batch(flow: &QuantileFlow, n: usize, d: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    // z_1 = f(1) x0 + Q_{g(1)}(u); with f(1) = 0 the data draw is irrelevant.
    let zeros = Array2::zeros((n, d));
    let f1 = flow.schedule.f(1.0);
    if f1 != 0.0 {
        return Err(Error::Config(format!("terminal law depends on data when f(1) = {f1}")));
    }
    process_batch(flow, &zeros, 1.0, rng)
}

/// Trains an [`ImmNet`] with the general objective; the EMA copy serves as
/// the previous iterate. Returns the per-step loss.
pub fn train_imm<D>(net: &mut ImmNet, flow: &QuantileFlow, data: D, steps: usize, cfg: &ImmConfig, rng: &mut Rng) -> Result<Vec<f64>>
where
    D: Fn(usize, &mut Rng) -> Array2<f64>,
{
    cfg.validate()?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut ema = Ema::new(cfg.ema_decay, &net.net.params);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let prev = ImmNet { net: VelocityNet { config: net.net.config.clone(), params: ema.shadow.clone() } };
        let mut tape = Tape::new();
        let theta = net.net.register(&mut tape);
        let mut total = None;
        for _ in 0..cfg.groups {
            let t = 0.05 + 0.95 * rng.uniform();
            let s = t * rng.uniform();
            let x0 = data(cfg.particles, rng);
            let g = imm_groups(net, &prev, flow, &x0, s, t, cfg, rng)?;
            // The current group on the tape: (f(s) - kappa f(t)) x_hat + kappa z_t.
            let kappa = flow.transfer_ratio(s, t)?;
            let a = flow.schedule.f(s) - kappa * flow.schedule.f(t);
            let (x, times) = ImmNet::inputs(&g.z_t, &g.eta, s, t)?;
            let xv = tape.constant(x);
            let xhat = net.net.forward_tape(&mut tape, &theta, xv, &times)?;
            let scaled = tape.scale(xhat, a);
            let shift = tape.constant(&g.z_t * kappa);
            let cur = tape.add(scaled, shift)?;
            let h = bandwidth(flow, cfg, t, tape.value(cur), &g.previous);
            let value = Array2::from_elem((1, 1), laplace_mmd_sq(tape.value(cur), &g.previous, h));
            let mmd = tape.custom(Box::new(MmdOp { other: g.previous, h }), &[cur], value);
            total = Some(match total {
                None => mmd,
                Some(acc) => tape.add(acc, mmd)?,
            });
        }
        let total = tape.scale(total.expect("at least one group"), 1.0 / cfg.groups as f64);
        let loss = tape.scalar(total);
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "IMM loss".into(), step: step as u64 });
        }
        let grads = tape.backward(total)?;
        let gs: Vec<Array2<f64>> = theta.iter().map(|&v| grads.get(v)).collect();
        adam.update(&mut net.net.params, &gs, cfg.lr)?;
        ema.update(&net.net.params)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ToyTarget;
    use crate::numerics::{ks_critical_99, ks_two_sample};
    use crate::quantile::{AnalyticQuantile, RqsConfig, RqsQuantile};
    use crate::transport::energy_mmd_sq;

    fn gaussian_flow() -> QuantileFlow {
        QuantileFlow::gaussian(Schedule::FmQuadratic)
    }

    fn rqs_flow() -> QuantileFlow {
        let mut q = RqsQuantile::new(RqsConfig { bins: 8, ..RqsConfig::default() }).unwrap();
        let mut rng = Rng::new(17);
        for p in q.params.iter_mut() {
            *p += 0.4 * rng.gauss();
        }
        QuantileFlow::scaled(Schedule::Linear, Arc::new(q))
    }

    /// Oracle generator returning the data points it was built with.
    struct Oracle(Array2<f64>);

    impl X0Generator for Oracle {
        fn predict(&self, _s: f64, _t: f64, _z: &Array2<f64>, _eta: &Array2<f64>) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    fn random_pair(flow: &QuantileFlow, t: f64, rng: &mut Rng) -> (f64, f64) {
        let x = 2.0 * rng.gauss();
        let d = flow.sample_process(&[x], t, rng).unwrap();
        (x, d.z[0])
    }

    #[test]
    fn endpoint_identities() {
        for flow in [gaussian_flow(), rqs_flow()] {
            let mut rng = Rng::new(1);
            for _ in 0..1000 {
                let t = 0.01 + 0.99 * rng.uniform();
                let (x, y) = random_pair(&flow, t, &mut rng);
                assert_eq!(flow.interpolant(0.0, t, x, y).unwrap(), x);
                let yy = flow.interpolant(t, t, x, y).unwrap();
                assert!((yy - y).abs() < 1e-9 * (1.0 + y.abs()), "{yy} vs {y}");
            }
        }
    }

    #[test]
    fn semigroup_residuals() {
        for (flow, tol) in [(gaussian_flow(), 1e-9), (rqs_flow(), 1e-7)] {
            let mut rng = Rng::new(2);
            let mut worst = 0.0f64;
            for _ in 0..10_000 {
                let mut ts = [rng.uniform(), rng.uniform(), rng.uniform()];
                ts.sort_by(f64::total_cmp);
                let [s, r, t] = ts;
                let (x, y) = random_pair(&flow, t, &mut rng);
                worst = worst.max(flow.check_semigroup(s, r, t, x, y).unwrap());
            }
            assert!(worst < tol, "{worst}");
            assert_eq!(flow.check_semigroup(0.2, 0.5, 0.9, 0.0, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn ddim_closed_form_matches() {
        let flow = gaussian_flow();
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            let t = 0.01 + 0.99 * rng.uniform();
            let s = t * rng.uniform();
            let (x, y) = random_pair(&flow, t, &mut rng);
            let got = flow.interpolant(s, t, x, y).unwrap();
            assert!((got - ddim_closed_form(s, t, x, y)).abs() < 1e-10 * (1.0 + got.abs()));
        }
    }

    #[test]
    fn interpolate_process_recovers_the_path() {
        for flow in [gaussian_flow(), rqs_flow()] {
            let mut rng = Rng::new(4);
            let z0 = [0.3, -1.1];
            let draw = flow.sample_process(&z0, 0.8, &mut rng).unwrap();
            assert_eq!(flow.interpolate_process(&z0, &draw, 0.0).unwrap(), z0.to_vec());
            let zt = flow.interpolate_process(&z0, &draw, 0.8).unwrap();
            for (a, b) in zt.iter().zip(&draw.z) {
                assert!((a - b).abs() < 1e-12);
            }
            let s = 0.37;
            let got = flow.interpolate_process(&z0, &draw, s).unwrap();
            let want = flow.at_uniform(&z0, s, &draw.u).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} {b}");
            }
        }
    }

    #[test]
    fn image_violation_is_a_domain_error() {
        let flow = QuantileFlow::scaled(Schedule::Linear, Arc::new(AnalyticQuantile::uniform_sym()));
        // Q_{g(t)} has image (-t, t) around f(t) x.
        assert!(matches!(flow.interpolant(0.2, 0.5, 0.0, 0.9), Err(Error::Domain { .. })));
        assert!(flow.interpolant(0.2, 0.5, 0.0, 0.4).is_ok());
    }

    #[test]
    fn transfer_ratio_matches_interpolant() {
        for flow in [gaussian_flow(), rqs_flow()] {
            let (s, t) = (0.3, 0.7);
            let k = flow.transfer_ratio(s, t).unwrap();
            let mut rng = Rng::new(5);
            let (x, y) = random_pair(&flow, t, &mut rng);
            let want = flow.schedule.f(s) * x + k * (y - flow.schedule.f(t) * x);
            assert!((flow.interpolant(s, t, x, y).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn marginal_preservation_with_oracle_data() {
        let flow = gaussian_flow();
        let mut rng = Rng::new(6);
        let n = 10_000;
        let (s, t) = (0.35, 0.8);
        let x0 = ToyTarget::GridGmm.sample_batch(n, &mut rng);
        let zt = process_batch(&flow, &x0, t, &mut rng).unwrap();
        let moved = interpolant_batch(&flow, s, t, &x0, &zt).unwrap();
        let fresh = ToyTarget::GridGmm.sample_batch(n, &mut rng);
        let zs = process_batch(&flow, &fresh, s, &mut rng).unwrap();
        for j in 0..2 {
            let a = moved.column(j).to_vec();
            let b = zs.column(j).to_vec();
            let crit = ks_critical_99(n as f64 / 2.0);
            assert!(ks_two_sample(&a, &b) < crit);
        }
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let a = Array2::from_shape_simple_fn((5, 2), || rng.gauss());
        let b = Array2::from_shape_simple_fn((4, 2), || rng.gauss());
        let h = 0.8;
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let val = Array2::from_elem((1, 1), laplace_mmd_sq(&a, &b, h));
        let m = tape.custom(Box::new(MmdOp { other: b.clone(), h }), &[av], val);
        let g = tape.backward(m).unwrap().get(av);
        let eps = 1e-6;
        for i in 0..5 {
            for j in 0..2 {
                let mut p = a.clone();
                p[[i, j]] += eps;
                let mut q = a.clone();
                q[[i, j]] -= eps;
                let fd = (laplace_mmd_sq(&p, &b, h) - laplace_mmd_sq(&q, &b, h)) / (2.0 * eps);
                assert!((fd - g[[i, j]]).abs() < 1e-7, "{fd} {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn naive_loss_is_finite_for_single_particles() {
        let flow = gaussian_flow();
        let cfg = ImmConfig { particles: 1, ..ImmConfig::default() };
        let mut rng = Rng::new(8);
        let net = ImmNet::new(2, &cfg, &mut rng).unwrap();
        let l = imm_naive_loss(&net, &flow, |n, r| ToyTarget::GridGmm.sample_batch(n, r), 0.3, 0.7, &cfg, &mut rng).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn general_loss_bootstrap_cases() {
        let flow = gaussian_flow();
        let cfg = ImmConfig { particles: 64, ..ImmConfig::default() };
        let mut rng = Rng::new(9);
        let net = ImmNet::new(2, &cfg, &mut rng).unwrap();
        let x0 = ToyTarget::GridGmm.sample_batch(64, &mut rng);
        assert_eq!(imm_general_loss(&net, &net, &flow, &x0, 0.2, 0.6, 0.0, &cfg, &mut rng).unwrap(), 0.0);
        // With t <= s + eps the previous group is the exact z_s.
        let (s, t) = (0.5, 0.55);
        assert_eq!(cfg.bootstrap_time(s, t), s);
        let g = imm_groups(&net, &net, &flow, &x0, s, t, &cfg, &mut rng).unwrap();
        let want = interpolant_batch(&flow, s, t, &x0, &g.z_t).unwrap();
        assert!((&g.previous - &want).iter().all(|d| d.abs() < 1e-12));
        // Same generator and r = t: both groups follow the same law.
        let cfg_big = ImmConfig { eps: 1e-9, particles: 64, ..ImmConfig::default() };
        let l = imm_general_loss(&net, &net, &flow, &x0, 0.2, 0.6, 1.0, &cfg_big, &mut rng).unwrap();
        assert!(l >= 0.0 && l < 0.1, "{l}");
    }

    #[test]
    fn oracle_multistep_returns_the_data() {
        let flow = gaussian_flow();
        let mut rng = Rng::new(10);
        let x0 = ToyTarget::GridGmm.sample_batch(50, &mut rng);
        let z1 = process_batch(&flow, &x0, 1.0, &mut rng).unwrap();
        for grid in [vec![1.0, 0.0], vec![1.0, 0.7, 0.3, 0.0]] {
            let out = imm_multistep_sample(&Oracle(x0.clone()), &flow, &z1, &grid, &mut rng).unwrap();
            assert!((&out - &x0).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn tiny_imm_training_beats_untrained() {
        let flow = gaussian_flow();
        let cfg = ImmConfig::default();
        let mut rng = Rng::new(11);
        let data = |n: usize, r: &mut Rng| ToyTarget::GridGmm.sample_batch(n, r);
        let mut net = ImmNet::new(2, &cfg, &mut rng).unwrap();
        let untrained = net.clone();
        let losses = train_imm(&mut net, &flow, data, 600, &cfg, &mut rng).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        let n = 1000;
        let target = data(n, &mut rng);
        let z1 = terminal_batch(&flow, n, 2, &mut rng).unwrap();
        let before = imm_multistep_sample(&untrained, &flow, &z1, &cfg.grid, &mut rng).unwrap();
        let after = imm_multistep_sample(&net, &flow, &z1, &cfg.grid, &mut rng).unwrap();
        let eb = energy_mmd_sq(before.view(), target.view()).unwrap();
        let ea = energy_mmd_sq(after.view(), target.view()).unwrap();
        assert!(ea < eb, "{ea} vs {eb}");
    }
}
