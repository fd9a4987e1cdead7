//! `baselines`: the four-latent comparison on the funnel.

use crate::error::CliResult;
use crate::io::{write_json, write_points};
use qnoise_core::autodiff::MlpConfig;
use qnoise_core::datasets::{FunnelReading, ToyTarget, ZScore};
use qnoise_core::numerics::normal_quantile;
use qnoise_core::quantile::{AnalyticQuantile, ProductQuantile, RqsConfig};
use qnoise_core::sampling::{generate, OdeConfig};
use qnoise_core::training::{CouplingKind, Latent, Noise, QuantileSchedule, TrainConfig, TrainState};
use qnoise_core::transport::energy_mmd_sq;
use qnoise_core::Rng;
use ndarray::{array, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Target quantile levels of `|x2|` whose exceedance rates are compared.
pub const TAIL_LEVELS: [f64; 3] = [0.9, 0.99, 0.999];
/// Quantile level of the learned-versus-Gaussian tail check.
pub const TAIL_P: f64 = 0.999;
const HEAVY_COORD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineBudget {
    pub steps: u64,
    pub pretrain_steps: u64,
    /// Generated samples per latent.
    pub samples: usize,
    /// Target draws used for the tail thresholds.
    pub reference: usize,
    pub ode_steps: usize,
    pub reading: FunnelReading,
}

impl Default for BaselineBudget {
    fn default() -> Self {
        Self { steps: 20_000, pretrain_steps: 50_000, samples: 100_000, reference: 1_000_000, ode_steps: 100, reading: FunnelReading::Std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineLatent {
    Uniform,
    Gaussian,
    StudentT,
    Learned,
}

impl BaselineLatent {
    pub const ALL: [BaselineLatent; 4] = [Self::Uniform, Self::Gaussian, Self::StudentT, Self::Learned];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Gaussian => "gaussian",
            Self::StudentT => "student-t",
            Self::Learned => "learned",
        }
    }

    pub fn latent(self) -> CliResult<Latent> {
        let analytic = |quantile| Latent::Analytic { dim: 2, quantile };
        Ok(match self {
            Self::Uniform => analytic(AnalyticQuantile::uniform_sym()),
            Self::Gaussian => analytic(AnalyticQuantile::gaussian()),
            Self::StudentT => analytic(AnalyticQuantile::student_t_preset()),
            Self::Learned => Latent::Learned { quantile: ProductQuantile::new(2, RqsConfig::heavy_tailed())? },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailBin {
    pub level: f64,
    pub threshold: f64,
    pub expected: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub latent: BaselineLatent,
    pub energy_mmd_sq: f64,
    /// Mean absolute log ratio of observed to expected tail exceedance.
    pub tail_score: f64,
    pub tail_bins: Vec<TailBin>,
    /// Latent coordinate-2 quantile at `TAIL_P`, in data units.
    pub latent_q_tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub dataset: String,
    pub budget: BaselineBudget,
    pub data_std: Vec<f64>,
    /// Gaussian quantile at `TAIL_P` times the coordinate-2 data std.
    pub gaussian_q_tail: f64,
    pub latents: Vec<LatentReport>,
}

impl BaselineReport {
    pub fn get(&self, l: BaselineLatent) -> Option<&LatentReport> {
        self.latents.iter().find(|r| r.latent == l)
    }
}

/// `|x2|` quantiles of the target at [`TAIL_LEVELS`].
pub fn tail_thresholds(reference: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = reference.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    TAIL_LEVELS.iter().map(|q| a[((q * a.len() as f64) as usize).min(a.len() - 1)]).collect()
}

/// Exceedance rates with a half-count pseudo-count so empty bins stay finite.
pub fn tail_bins(samples: &[f64], thresholds: &[f64]) -> (Vec<TailBin>, f64) {
    let n = samples.len() as f64;
    let bins: Vec<TailBin> = TAIL_LEVELS
        .iter()
        .zip(thresholds)
        .map(|(&level, &threshold)| {
            let k = samples.iter().filter(|v| v.abs() > threshold).count() as f64;
            TailBin { level, threshold, expected: 1.0 - level, observed: (k + 0.5) / (n + 1.0) }
        })
        .collect();
    let score = bins.iter().map(|b| (b.observed / b.expected).ln().abs()).sum::<f64>() / bins.len() as f64;
    (bins, score)
}

fn train_config(kind: BaselineLatent, budget: &BaselineBudget) -> TrainConfig {
    let quantile = if kind == BaselineLatent::Learned {
        QuantileSchedule { pretrain_steps: budget.pretrain_steps, joint_steps: 0, decay_to_zero_at: 0, freeze_at: 0 }
    } else {
        QuantileSchedule { pretrain_steps: 0, ..QuantileSchedule::default() }
    };
    TrainConfig {
        steps: budget.steps,
        coupling: CouplingKind::Independent,
        zscore: true,
        ema_decay: 0.999,
        quantile,
        ..TrainConfig::default()
    }
}

/// Trains one latent variant and returns its generated samples (data units).
pub fn run_latent(
    kind: BaselineLatent,
    budget: &BaselineBudget,
    zscore: &ZScore,
    seed: u64,
) -> CliResult<(TrainState, ndarray::Array2<f64>)> {
    let target = ToyTarget::Funnel { reading: budget.reading };
    let cfg = train_config(kind, budget);
    let mlp = MlpConfig::velocity(2, vec![64; 3], 0);
    let mut st = TrainState::new(cfg, mlp, Noise::Quantile(kind.latent()?), seed)?;
    st.set_zscore(zscore.clone())?;
    if kind == BaselineLatent::Learned {
        st.pretrain_quantile(|n, rng| target.sample_batch(n, rng), budget.pretrain_steps)?;
    }
    for _ in 0..budget.steps {
        let x = target.sample_batch(st.config.batch, &mut st.rng);
        st.train_step(&x)?;
    }
    let ode = OdeConfig { steps: budget.ode_steps, ..OdeConfig::default() };
    let g = generate(&st, budget.samples, &ode, &mut Rng::new(seed).derive(7), false)?;
    Ok((st, g.points))
}

fn latent_tail(st: &TrainState, z: &ZScore) -> CliResult<f64> {
    let latent = st.noise.latent().expect("baselines use quantile latents");
    let q = latent.eval(&array![[0.5, TAIL_P]])?.values[[0, HEAVY_COORD]];
    Ok(q * z.std[HEAVY_COORD] + z.mean[HEAVY_COORD])
}

pub fn run_baselines(budget: &BaselineBudget, seed: u64, out: Option<&Path>) -> CliResult<BaselineReport> {
    let target = ToyTarget::Funnel { reading: budget.reading };
    let root = Rng::new(seed);
    let fit = target.sample_batch(100_000, &mut root.derive(1));
    let zscore = ZScore::fit(&fit)?;
    let reference = target.sample_batch(budget.reference, &mut root.derive(2));
    let thresholds = tail_thresholds(&reference.column(HEAVY_COORD).to_vec());
    let energy_ref = target.sample_batch(budget.samples.min(4000), &mut root.derive(3));
    let mut latents = Vec::new();
    for (i, kind) in BaselineLatent::ALL.into_iter().enumerate() {
        let (st, points) = run_latent(kind, budget, &zscore, root.derive(10 + i as u64).next_u64())?;
        if let Some(dir) = out {
            write_points(&dir.join(format!("samples_{}.csv", kind.name())), &points)?;
        }
        let sub = points.slice_axis(Axis(0), (0..energy_ref.nrows().min(points.nrows())).into());
        let energy = energy_mmd_sq(sub, energy_ref.view())?;
        let (tail_bins, tail_score) = tail_bins(&points.column(HEAVY_COORD).to_vec(), &thresholds);
        latents.push(LatentReport { latent: kind, energy_mmd_sq: energy, tail_score, tail_bins, latent_q_tail: latent_tail(&st, &zscore)? });
    }
    let report = BaselineReport {
        dataset: target.name().to_string(),
        budget: *budget,
        gaussian_q_tail: normal_quantile(TAIL_P)? * zscore.std[HEAVY_COORD],
        data_std: zscore.std.clone(),
        latents,
    };
    if let Some(dir) = out {
        write_json(&dir.join("baselines.json"), &report)?;
    }
    Ok(report)
}
