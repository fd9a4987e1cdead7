//! `eval`: sample-quality metrics against fresh target draws.

use crate::error::{CliError, CliResult};
use crate::io::{read_points, read_trajectory};
use ndarray::{Array2, Axis};
use qnoise_core::datasets::ToyTarget;
use qnoise_core::transport::{empirical_w2_sq, energy_mmd_sq, path_length_stats};
use qnoise_core::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Subsample size of the paired W2 estimate (cubic cost).
pub const W2_SUBSAMPLE: usize = 1000;
/// Subsample size of the energy distance (quadratic cost).
pub const ENERGY_SUBSAMPLE: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub w2_sq: f64,
    pub w2_pairs: usize,
    pub energy_mmd_sq: f64,
    /// Per-coordinate W2 between sorted samples and sorted target draws.
    pub quantile_w2: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_path_length: Option<f64>,
}

fn subsample(x: &Array2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    if x.nrows() <= k {
        return x.clone();
    }
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k);
    x.select(Axis(0), &idx)
}

/// `sqrt(mean((a_(i) - b_(i))^2))` for equal-size samples: the W2 distance
/// between the empirical laws, i.e. the L2 distance of their quantile functions.
pub fn sorted_w2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let s: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
    (s / a.len() as f64).sqrt()
}

pub fn evaluate(samples: &Array2<f64>, target: &ToyTarget, seed: u64) -> CliResult<EvalReport> {
    let n = samples.nrows();
    if n == 0 {
        return Err(CliError::config("no samples to evaluate"));
    }
    if samples.ncols() != target.dim() {
        return Err(CliError::config(format!("samples have {} columns, {} expects {}", samples.ncols(), target.name(), target.dim())));
    }
    let mut rng = Rng::new(seed);
    let reference = target.sample_batch(n, &mut rng);
    let a = subsample(samples, W2_SUBSAMPLE, &mut rng);
    let b = subsample(&reference, W2_SUBSAMPLE, &mut rng);
    let w2_sq = empirical_w2_sq(a.view(), b.view())?;
    let a = subsample(samples, ENERGY_SUBSAMPLE, &mut rng);
    let b = subsample(&reference, ENERGY_SUBSAMPLE, &mut rng);
    let energy = energy_mmd_sq(a.view(), b.view())?;
    let quantile_w2 = (0..samples.ncols())
        .map(|j| sorted_w2(&samples.column(j).to_vec(), &reference.column(j).to_vec()))
        .collect();
    Ok(EvalReport {
        dataset: target.name().to_string(),
        n,
        w2_sq,
        w2_pairs: n.min(W2_SUBSAMPLE),
        energy_mmd_sq: energy,
        quantile_w2,
        mean_path_length: None,
    })
}

pub fn cmd_eval(samples: &Path, target: &ToyTarget, trajectories: Option<&Path>, seed: u64) -> CliResult<EvalReport> {
    target.validate()?;
    let x = read_points(samples)?;
    let mut report = evaluate(&x, target, seed)?;
    if let Some(p) = trajectories {
        let states = read_trajectory(p)?;
        report.mean_path_length = Some(path_length_stats(states.view()).mean);
    }
    Ok(report)
}
