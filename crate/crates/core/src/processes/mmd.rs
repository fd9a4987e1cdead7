use super::{Process1D, SUPPORT_SLACK};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Wasserstein gradient flow of the negative-distance MMD from `delta_0`
/// towards `U[-b, b]`: the law at time t is `U[-w_t, w_t]` with
/// `w_t = b (1 - e^{-t/b})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformMmdProcess {
    pub b: f64,
}

impl UniformMmdProcess {
    pub fn new(b: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::domain("UniformMmdProcess", format!("half-width b = {b} must be positive")));
        }
        Ok(Self { b })
    }

    /// Half-width of the support at time t; `t = inf` gives b.
    pub fn half_width(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            -self.b * (-t / self.b).exp_m1()
        }
    }

    /// Closed-form `||v_t||^2` in `L2(mu_t)` from integrating the velocity
    /// over the uniform law: `e^{-2t/b} / 3`.
    pub fn action_sq(&self, t: f64) -> f64 {
        (-2.0 * t / self.b).exp() / 3.0
    }
}

impl Process1D for UniformMmdProcess {
    fn sample(&self, t: f64, rng: &mut Rng) -> f64 {
        self.half_width(t) * rng.uniform_in(-1.0, 1.0)
    }

    fn velocity(&self, t: f64, x: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::domain("mmd_uniform_velocity", format!("t = {t} must be positive")));
        }
        let w = self.half_width(t);
        if x.abs() > w * (1.0 + SUPPORT_SLACK) {
            return Err(Error::domain(
                "mmd_uniform_velocity",
                format!("x = {x} outside support [-{w}, {w}]"),
            ));
        }
        if t.is_infinite() {
            return Ok(0.0);
        }
        Ok(x / (self.b * (t / self.b).exp_m1()))
    }

    fn support(&self, t: f64) -> (f64, f64) {
        let w = self.half_width(t);
        (-w, w)
    }

    fn density(&self, t: f64, x: f64) -> Option<f64> {
        let w = self.half_width(t);
        if w <= 0.0 {
            return None;
        }
        Some(if x.abs() <= w { 0.5 / w } else { 0.0 })
    }

    fn cdf(&self, t: f64, x: f64) -> Option<f64> {
        let w = self.half_width(t);
        if w <= 0.0 {
            return None;
        }
        Some(((x + w) / (2.0 * w)).clamp(0.0, 1.0))
    }

    fn quantile(&self, t: f64, p: f64) -> Option<f64> {
        Some(self.half_width(t) * (2.0 * p - 1.0))
    }

    fn name(&self) -> &'static str {
        "mmd-uniform"
    }
}

pub fn mmd_uniform_velocity(b: f64, t: f64, x: f64) -> Result<f64> {
    UniformMmdProcess::new(b)?.velocity(t, x)
}
