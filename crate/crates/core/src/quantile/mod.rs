//! Monotone quantile functions: fixed analytic baselines and the learnable
//! rational-quadratic spline map used as a data-adapted latent.

mod analytic;
mod dual;
mod product;
mod rqs;

pub use analytic::AnalyticQuantile;
pub use product::{ProductQuantile, QuantileBatch, QUANTILE_CHECKPOINT_VERSION};
pub use rqs::{Activation, RqsConfig, RqsQuantile};

use crate::compose::Schedule;
use crate::error::Result;
use crate::numerics::Rng;
use std::fmt::Debug;

/// Clamp applied to uniform draws fed to a quantile map.
pub const U_EPS: f64 = 1e-7;

pub fn clamp_u(u: f64) -> f64 {
    u.clamp(U_EPS, 1.0 - U_EPS)
}

/// A strictly increasing map `(0,1) -> R`, the generalised inverse of a CDF.
pub trait QuantileFn: Debug + Send + Sync {
    fn eval(&self, p: f64) -> Result<f64>;

    fn deriv(&self, p: f64) -> Result<f64>;

    /// The CDF on the image of `eval`.
    fn inverse(&self, x: f64) -> Result<f64>;

    /// Closure of the image of `eval`.
    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

pub(crate) fn check_open_unit(op: &'static str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(crate::Error::domain(op, format!("p = {p} not in (0, 1)")))
    }
}

/// Squared 1D Wasserstein distance as the L2 distance between quantile
/// functions, by the midpoint rule on `n_grid` nodes.
pub fn quantile_w2_1d(q_mu: &dyn QuantileFn, q_nu: &dyn QuantileFn, n_grid: usize) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..n_grid {
        let s = (i as f64 + 0.5) / n_grid as f64;
        let d = q_mu.eval(s)? - q_nu.eval(s)?;
        acc += d * d;
    }
    Ok(acc / n_grid as f64)
}

/// One draw of the quantile process `f(t) x0 + g(t) Q(u)` together with u.
pub fn quantile_process_sample(
    q: &dyn QuantileFn,
    schedule: &Schedule,
    x0: f64,
    t: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let u = clamp_u(rng.uniform());
    let g = schedule.g(t);
    let noise = if g == 0.0 { 0.0 } else { g * q.eval(u)? };
    Ok((schedule.f(t) * x0 + noise, u))
}

/// `sum_i log dQ^i/du_i` for a product of per-coordinate quantiles.
pub fn logdet_jacobian(coords: &[&dyn QuantileFn], u: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for (q, &ui) in coords.iter().zip(u) {
        s += q.deriv(ui)?.ln();
    }
    Ok(s)
}
