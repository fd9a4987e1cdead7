//! Toy targets: Neal's funnel, a weighted 3x3 Gaussian grid, a checkerboard
//! and a two-atom measure, plus per-coordinate z-score normalisation.

use crate::error::{Error, Result};
use crate::numerics::Rng;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const GMM_WEIGHTS: [f64; 9] = [0.01, 0.1, 0.3, 0.2, 0.02, 0.15, 0.02, 0.15, 0.05];
pub const GMM_SIGMA: f64 = 0.025;

/// Whether the second argument of each funnel normal is a variance or a
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunnelReading {
    #[default]
    Variance,
    Std,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ToyTarget {
    Funnel {
        #[serde(default)]
        reading: FunnelReading,
    },
    GridGmm,
    Checkerboard {
        #[serde(default = "default_lo")]
        lo: i32,
        #[serde(default = "default_hi")]
        hi: i32,
    },
    TwoAtom,
}

fn default_lo() -> i32 {
    -4
}

fn default_hi() -> i32 {
    4
}

fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

pub fn gmm_mean(i: usize) -> [f64; 2] {
    [(i % 3) as f64 - 1.0, (i / 3) as f64 - 1.0]
}

impl ToyTarget {
    pub fn funnel() -> Self {
        ToyTarget::Funnel { reading: FunnelReading::Variance }
    }

    pub fn checkerboard() -> Self {
        ToyTarget::Checkerboard { lo: -4, hi: 4 }
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if let ToyTarget::Checkerboard { lo, hi } = *self {
            if lo >= hi || (hi - lo) % 2 != 0 {
                return Err(Error::Config(format!("checkerboard needs lo < hi with even side length, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Variances `(var_1, var_2 | x_1)` of the funnel factors.
    fn funnel_vars(reading: FunnelReading, x1: f64) -> (f64, f64) {
        match reading {
            FunnelReading::Variance => (3.0, (0.5 * x1).exp()),
            FunnelReading::Std => (9.0, x1.exp()),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> [f64; 2] {
        match *self {
            ToyTarget::Funnel { reading } => {
                let (v1, _) = Self::funnel_vars(reading, 0.0);
                let x1 = v1.sqrt() * rng.gauss();
                let (_, v2) = Self::funnel_vars(reading, x1);
                [x1, v2.sqrt() * rng.gauss()]
            }
            ToyTarget::GridGmm => {
                let i = rng.categorical(&GMM_WEIGHTS);
                let m = gmm_mean(i);
                [m[0] + GMM_SIGMA * rng.gauss(), m[1] + GMM_SIGMA * rng.gauss()]
            }
            ToyTarget::Checkerboard { lo, hi } => {
                let side = (hi - lo) as usize;
                let active = side * side / 2;
                let k = rng.index(active);
                // Cells of each row alternate; row r holds side/2 active cells.
                let r = k / (side / 2);
                let c = 2 * (k % (side / 2)) + ((r as i32 + lo + lo).rem_euclid(2)) as usize;
                let x = (lo + c as i32) as f64 + rng.uniform();
                let y = (lo + r as i32) as f64 + rng.uniform();
                [x, y]
            }
            ToyTarget::TwoAtom => {
                if rng.uniform() < 0.5 {
                    [1.0, 1.0]
                } else {
                    [-1.0, -1.0]
                }
            }
        }
    }

    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let mut out = Array2::zeros((n, 2));
        for i in 0..n {
            let p = self.sample(rng);
            out[[i, 0]] = p[0];
            out[[i, 1]] = p[1];
        }
        out
    }

    /// Lebesgue density where one exists.
    pub fn density(&self, x: [f64; 2]) -> Option<f64> {
        match *self {
            ToyTarget::Funnel { reading } => {
                let (v1, v2) = Self::funnel_vars(reading, x[0]);
                Some(normal_density(x[0], 0.0, v1) * normal_density(x[1], 0.0, v2))
            }
            ToyTarget::GridGmm => {
                let var = GMM_SIGMA * GMM_SIGMA;
                Some(
                    GMM_WEIGHTS
                        .iter()
                        .enumerate()
                        .map(|(i, w)| {
                            let m = gmm_mean(i);
                            w * normal_density(x[0], m[0], var) * normal_density(x[1], m[1], var)
                        })
                        .sum(),
                )
            }
            ToyTarget::Checkerboard { lo, hi } => {
                let inside = x[0] >= lo as f64 && x[0] < hi as f64 && x[1] >= lo as f64 && x[1] < hi as f64;
                let even = (x[0].floor() as i64 + x[1].floor() as i64).rem_euclid(2) == 0;
                Some(if inside && even { 2.0 / ((hi - lo) as f64).powi(2) } else { 0.0 })
            }
            ToyTarget::TwoAtom => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyTarget::Funnel { .. } => "funnel",
            ToyTarget::GridGmm => "grid-gmm",
            ToyTarget::Checkerboard { .. } => "checkerboard",
            ToyTarget::TwoAtom => "two-atom",
        }
    }
}

/// Per-coordinate affine normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Coordinates whose spread fell below the floor.
    pub floored: Vec<bool>,
}

pub const ZSCORE_STD_FLOOR: f64 = 1e-8;

impl ZScore {
    pub fn fit(samples: &Array2<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n == 0 {
            return Err(Error::shape("zscore_fit", "no samples"));
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut floored = Vec::new();
        for col in samples.columns() {
            let m = col.sum() / n as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            mean.push(m);
            floored.push(s < ZSCORE_STD_FLOOR);
            std.push(s.max(ZSCORE_STD_FLOOR));
        }
        Ok(Self { mean, std, floored })
    }

    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d], floored: vec![false; d] }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }

    pub fn invert(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
        }
        out
    }
}
