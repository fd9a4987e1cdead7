use super::{Process1D, SUPPORT_SLACK};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::quantile::QuantileFn;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Deterministic growth `g` of a scaled latent, `g(0) = 0`, `g(1) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleFn {
    Linear,
    Sqrt,
    Power(f64),
}

impl ScaleFn {
    pub fn g(&self, t: f64) -> f64 {
        match *self {
            ScaleFn::Linear => t,
            ScaleFn::Sqrt => t.max(0.0).sqrt(),
            ScaleFn::Power(p) => t.max(0.0).powf(p),
        }
    }

    pub fn dg(&self, t: f64) -> f64 {
        match *self {
            ScaleFn::Linear => 1.0,
            ScaleFn::Sqrt => 0.5 / t.sqrt(),
            ScaleFn::Power(p) => p * t.powf(p - 1.0),
        }
    }

    /// `int_0^1 g'(t)^2 dt`, infinite when `g'` is not square integrable.
    pub fn energy(&self) -> f64 {
        match *self {
            ScaleFn::Linear => 1.0,
            ScaleFn::Sqrt => f64::INFINITY,
            ScaleFn::Power(p) if p > 0.5 => p * p / (2.0 * p - 1.0),
            ScaleFn::Power(_) => f64::INFINITY,
        }
    }
}

/// `(g'(t) / g(t)) x` with the convention `v_t(0) = 0`.
pub fn scaled_velocity<G, D>(g: G, dg: D, t: f64, x: f64) -> Result<f64>
where
    G: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    if x == 0.0 {
        return Ok(0.0);
    }
    let gt = g(t);
    if !(t > 0.0) || !(gt > 0.0) {
        return Err(Error::domain(
            "scaled_velocity",
            format!("g({t}) = {gt} is not positive but x = {x} is nonzero"),
        ));
    }
    Ok(dg(t) / gt * x)
}

/// `Y_t = g(t) Z` with `Z = Q(U)` for a fixed quantile function Q.
#[derive(Debug, Clone)]
pub struct ScaledLatentProcess {
    pub scale: ScaleFn,
    pub latent: Arc<dyn QuantileFn>,
}

impl ScaledLatentProcess {
    pub fn new(scale: ScaleFn, latent: Arc<dyn QuantileFn>) -> Self {
        Self { scale, latent }
    }
}

impl Process1D for ScaledLatentProcess {
    fn sample(&self, t: f64, rng: &mut Rng) -> f64 {
        let gt = self.scale.g(t);
        if gt == 0.0 {
            return 0.0;
        }
        let u = rng.uniform();
        gt * self.latent.eval(u).expect("uniform draw lies in (0, 1)")
    }

    fn velocity(&self, t: f64, x: f64) -> Result<f64> {
        let (lo, hi) = self.support(t);
        let slack = SUPPORT_SLACK * (lo.abs().max(hi.abs()));
        if x < lo - slack || x > hi + slack {
            return Err(Error::domain("scaled_velocity", format!("x = {x} outside [{lo}, {hi}]")));
        }
        scaled_velocity(|s| self.scale.g(s), |s| self.scale.dg(s), t, x)
    }

    fn support(&self, t: f64) -> (f64, f64) {
        let gt = self.scale.g(t);
        if gt == 0.0 {
            return (0.0, 0.0);
        }
        let (lo, hi) = self.latent.support();
        (gt * lo, gt * hi)
    }

    fn density(&self, t: f64, x: f64) -> Option<f64> {
        let gt = self.scale.g(t);
        if gt <= 0.0 {
            return None;
        }
        let (lo, hi) = self.latent.support();
        let z = x / gt;
        if z <= lo || z >= hi {
            return Some(0.0);
        }
        let p = self.latent.inverse(z).ok()?;
        Some(1.0 / (gt * self.latent.deriv(p).ok()?))
    }

    fn cdf(&self, t: f64, x: f64) -> Option<f64> {
        let gt = self.scale.g(t);
        if gt <= 0.0 {
            return Some(if x >= 0.0 { 1.0 } else { 0.0 });
        }
        let (lo, hi) = self.latent.support();
        let z = x / gt;
        if z <= lo {
            return Some(0.0);
        }
        if z >= hi {
            return Some(1.0);
        }
        self.latent.inverse(z).ok()
    }

    fn quantile(&self, t: f64, p: f64) -> Option<f64> {
        Some(self.scale.g(t) * self.latent.eval(p).ok()?)
    }

    fn name(&self) -> &'static str {
        "scaled-latent"
    }
}
