use super::{check_open_unit, QuantileFn};
use crate::error::{Error, Result};
use crate::numerics::{
    normal_cdf, normal_pdf, normal_quantile, student_t_cdf, student_t_pdf, student_t_quantile,
};
use serde::{Deserialize, Serialize};

/// Fixed latent laws used as baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum AnalyticQuantile {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    StudentT { nu: f64, scale: f64 },
}

impl AnalyticQuantile {
    pub fn gaussian() -> Self {
        AnalyticQuantile::Normal { mean: 0.0, std: 1.0 }
    }

    pub fn uniform_sym() -> Self {
        AnalyticQuantile::Uniform { lo: -1.0, hi: 1.0 }
    }

    /// Student-t with 20 degrees of freedom and scale 4.
    pub fn student_t_preset() -> Self {
        AnalyticQuantile::StudentT { nu: 20.0, scale: 4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AnalyticQuantile::Normal { std, .. } => std > 0.0,
            AnalyticQuantile::Uniform { lo, hi } => hi > lo,
            AnalyticQuantile::StudentT { nu, scale } => nu > 0.0 && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid analytic latent {self:?}")))
        }
    }
}

impl QuantileFn for AnalyticQuantile {
    fn eval(&self, p: f64) -> Result<f64> {
        check_open_unit("analytic_quantile", p)?;
        Ok(match *self {
            AnalyticQuantile::Normal { mean, std } => mean + std * normal_quantile(p)?,
            AnalyticQuantile::Uniform { lo, hi } => lo + (hi - lo) * p,
            AnalyticQuantile::StudentT { nu, scale } => scale * student_t_quantile(p, nu)?,
        })
    }

    fn deriv(&self, p: f64) -> Result<f64> {
        check_open_unit("analytic_quantile_deriv", p)?;
        Ok(match *self {
            AnalyticQuantile::Normal { std, .. } => std / normal_pdf(normal_quantile(p)?),
            AnalyticQuantile::Uniform { lo, hi } => hi - lo,
            AnalyticQuantile::StudentT { nu, scale } => {
                scale / student_t_pdf(student_t_quantile(p, nu)?, nu)
            }
        })
    }

    fn inverse(&self, x: f64) -> Result<f64> {
        let p = match *self {
            AnalyticQuantile::Normal { mean, std } => normal_cdf((x - mean) / std),
            AnalyticQuantile::Uniform { lo, hi } => {
                if x < lo || x > hi {
                    return Err(Error::domain("uniform_cdf_inverse", format!("x = {x} outside [{lo}, {hi}]")));
                }
                (x - lo) / (hi - lo)
            }
            AnalyticQuantile::StudentT { nu, scale } => student_t_cdf(x / scale, nu),
        };
        Ok(p)
    }

    fn support(&self) -> (f64, f64) {
        match *self {
            AnalyticQuantile::Uniform { lo, hi } => (lo, hi),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}
