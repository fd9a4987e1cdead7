//! One-dimensional noising processes started at the origin.
//!
//! Every process exposes a sampler for its law at time `t` and an analytic
//! velocity field that, together with the law, solves the 1D continuity
//! equation `d/dt mu_t + d/dx (mu_t v_t) = 0` with `mu_0 = delta_0`.

mod kac;
mod mmd;
mod scaled;
mod wiener;

pub use kac::{kac_sample, kac_velocity, KacProcess};
pub use mmd::{mmd_uniform_velocity, UniformMmdProcess};
pub use scaled::{scaled_velocity, ScaleFn, ScaledLatentProcess};
pub use wiener::{wiener_density, wiener_velocity, WienerProcess};

use crate::error::Result;
use crate::numerics::Rng;
use std::fmt::Debug;

/// A 1D process `Y_t` with `Y_0 = 0` and an analytic velocity field.
pub trait Process1D: Debug + Send + Sync {
    /// Draw `Y_t`.
    fn sample(&self, t: f64, rng: &mut Rng) -> f64;

    /// Velocity field `v_t(x)` on the support of `mu_t`.
    fn velocity(&self, t: f64, x: f64) -> Result<f64>;

    /// Closed support interval of `mu_t`.
    fn support(&self, t: f64) -> (f64, f64);

    fn density(&self, _t: f64, _x: f64) -> Option<f64> {
        None
    }

    fn cdf(&self, _t: f64, _x: f64) -> Option<f64> {
        None
    }

    fn quantile(&self, _t: f64, _p: f64) -> Option<f64> {
        None
    }

    /// Smallest process time at which `velocity` may be queried.
    fn min_time(&self) -> f64 {
        0.0
    }

    fn name(&self) -> &'static str;
}

/// Velocity queries just outside the support are snapped back by this much.
pub(crate) const SUPPORT_SLACK: f64 = 1e-12;
