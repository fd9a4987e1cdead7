use super::Process1D;
use crate::error::{Error, Result};
use crate::numerics::{normal_cdf, normal_quantile, Rng};
use std::f64::consts::PI;

/// Standard Brownian motion. Its velocity `x / (2t)` explodes at t = 0, so
/// velocity queries below `t_min` are rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WienerProcess {
    pub t_min: f64,
}

impl Default for WienerProcess {
    fn default() -> Self {
        Self { t_min: 1e-5 }
    }
}

impl WienerProcess {
    pub fn new(t_min: f64) -> Self {
        Self { t_min }
    }
}

pub fn wiener_velocity(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::domain("wiener_velocity", format!("t = {t} must be positive")));
    }
    Ok(x / (2.0 * t))
}

pub fn wiener_density(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::domain("wiener_density", format!("t = {t} must be positive")));
    }
    Ok((2.0 * PI * t).powf(-0.5) * (-x * x / (2.0 * t)).exp())
}

impl Process1D for WienerProcess {
    fn sample(&self, t: f64, rng: &mut Rng) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        t.sqrt() * rng.gauss()
    }

    fn velocity(&self, t: f64, x: f64) -> Result<f64> {
        if t < self.t_min {
            return Err(Error::domain(
                "wiener_velocity",
                format!("t = {t} below truncation t_min = {}", self.t_min),
            ));
        }
        wiener_velocity(t, x)
    }

    fn support(&self, t: f64) -> (f64, f64) {
        if t <= 0.0 {
            (0.0, 0.0)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        }
    }

    fn density(&self, t: f64, x: f64) -> Option<f64> {
        wiener_density(t, x).ok()
    }

    fn cdf(&self, t: f64, x: f64) -> Option<f64> {
        (t > 0.0).then(|| normal_cdf(x / t.sqrt()))
    }

    fn quantile(&self, t: f64, p: f64) -> Option<f64> {
        if t <= 0.0 {
            return Some(0.0);
        }
        normal_quantile(p).ok().map(|z| t.sqrt() * z)
    }

    fn min_time(&self) -> f64 {
        self.t_min
    }

    fn name(&self) -> &'static str {
        "wiener"
    }
}
