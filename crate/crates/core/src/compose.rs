//! d-dimensional conditional flows from independent 1D processes, wrapped in
//! mean-reverting schedules `X_t = f(t) X_0 + Y_{g(t)}`.

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::processes::{KacProcess, Process1D, ScaleFn, ScaledLatentProcess, UniformMmdProcess, WienerProcess};
use crate::quantile::AnalyticQuantile;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Signal decay `f` and noise clock `g` with `f(0)=1, f(1)=0, g(0)=0, g(1)=1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Linear,
    FmQuadratic,
    /// Variance preserving: `f = exp(-h/2)`, `g = 1 - exp(-h)` with
    /// `h(t) = beta_min t + (beta_max - beta_min) t^2 / 2`.
    Vp { beta_min: f64, beta_max: f64 },
    /// `f = 1 - t`, `g = -ln(1 - t)`; defined on `[0, 1)` with `g(1) = inf`.
    MmdLog,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Linear
    }
}

impl Schedule {
    pub fn vp_default() -> Self {
        Schedule::Vp { beta_min: 0.1, beta_max: 20.0 }
    }

    fn vp_h(beta_min: f64, beta_max: f64, t: f64) -> (f64, f64) {
        (beta_min * t + 0.5 * (beta_max - beta_min) * t * t, beta_min + (beta_max - beta_min) * t)
    }

    pub fn f(&self, t: f64) -> f64 {
        match *self {
            Schedule::Linear | Schedule::FmQuadratic | Schedule::MmdLog => 1.0 - t,
            Schedule::Vp { beta_min, beta_max } => (-0.5 * Self::vp_h(beta_min, beta_max, t).0).exp(),
        }
    }

    pub fn df(&self, t: f64) -> f64 {
        match *self {
            Schedule::Linear | Schedule::FmQuadratic | Schedule::MmdLog => -1.0,
            Schedule::Vp { beta_min, beta_max } => {
                let (h, dh) = Self::vp_h(beta_min, beta_max, t);
                -0.5 * dh * (-0.5 * h).exp()
            }
        }
    }

    pub fn g(&self, t: f64) -> f64 {
        match *self {
            Schedule::Linear => t,
            Schedule::FmQuadratic => t * t,
            Schedule::Vp { beta_min, beta_max } => -(-Self::vp_h(beta_min, beta_max, t).0).exp_m1(),
            Schedule::MmdLog => -(-t).ln_1p(),
        }
    }

    pub fn dg(&self, t: f64) -> f64 {
        match *self {
            Schedule::Linear => 1.0,
            Schedule::FmQuadratic => 2.0 * t,
            Schedule::Vp { beta_min, beta_max } => {
                let (h, dh) = Self::vp_h(beta_min, beta_max, t);
                dh * (-h).exp()
            }
            Schedule::MmdLog => 1.0 / (1.0 - t),
        }
    }

    /// Largest admissible time; the log clock diverges at 1.
    pub fn t_max_exclusive(&self) -> bool {
        matches!(self, Schedule::MmdLog)
    }

    pub fn validate(&self) -> Result<()> {
        if let Schedule::Vp { beta_min, beta_max } = *self {
            if !(beta_min >= 0.0 && beta_max >= beta_min && beta_max > 0.0) {
                return Err(Error::Config(format!("vp schedule needs 0 <= beta_min <= beta_max, got {beta_min}, {beta_max}")));
            }
        }
        Ok(())
    }

    /// Smallest t with `g(t) >= tau`, by bisection (g is increasing).
    pub fn time_for_clock(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.g(mid) >= tau {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Independent, possibly heterogeneous, 1D processes per coordinate.
#[derive(Debug, Clone)]
pub struct ProductProcess {
    pub components: Vec<Arc<dyn Process1D>>,
}

impl ProductProcess {
    pub fn new(components: Vec<Arc<dyn Process1D>>) -> Self {
        Self { components }
    }

    pub fn homogeneous(p: Arc<dyn Process1D>, d: usize) -> Self {
        Self { components: vec![p; d] }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn min_time(&self) -> f64 {
        self.components.iter().map(|c| c.min_time()).fold(0.0, f64::max)
    }

    /// One draw of `Y_tau`, each coordinate on its own keyed substream.
    pub fn sample(&self, tau: f64, rng: &mut Rng) -> Vec<f64> {
        let base = rng.next_u64();
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| c.sample(tau, &mut rng.derive(base.wrapping_add(i as u64))))
            .collect()
    }
}

pub fn product_velocity(proc: &ProductProcess, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != proc.dim() {
        return Err(Error::shape("product_velocity", format!("expected {} coordinates, got {}", proc.dim(), x.len())));
    }
    proc.components
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (c, &xi))| c.velocity(t, xi).map_err(|e| Error::Component { index: i, source: Box::new(e) }))
        .collect()
}

/// Serialisable description of a 1D noise process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProcessSpec {
    Wiener {
        #[serde(default = "default_t_min")]
        t_min: f64,
    },
    Kac { a: f64, c: f64 },
    MmdUniform { b: f64 },
    ScaledLatent { scale: ScaleFn, latent: AnalyticQuantile },
}

fn default_t_min() -> f64 {
    WienerProcess::default().t_min
}

impl ProcessSpec {
    pub fn build(&self) -> Result<Arc<dyn Process1D>> {
        Ok(match *self {
            ProcessSpec::Wiener { t_min } => {
                if !(t_min > 0.0) {
                    return Err(Error::Config(format!("wiener t_min must be positive, got {t_min}")));
                }
                Arc::new(WienerProcess::new(t_min))
            }
            ProcessSpec::Kac { a, c } => Arc::new(KacProcess::new(a, c)?),
            ProcessSpec::MmdUniform { b } => Arc::new(UniformMmdProcess::new(b)?),
            ProcessSpec::ScaledLatent { scale, latent } => {
                latent.validate()?;
                Arc::new(ScaledLatentProcess::new(scale, Arc::new(latent)))
            }
        })
    }
}

/// Serialisable description of a [`MeanRevertingFlow`] with one process
/// family on every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(default)]
    pub schedule: Schedule,
    pub process: ProcessSpec,
    #[serde(default = "default_clamp")]
    pub clamp_to_support: bool,
}

fn default_clamp() -> bool {
    true
}

impl FlowSpec {
    pub fn build(&self, dim: usize) -> Result<MeanRevertingFlow> {
        self.schedule.validate()?;
        let noise = ProductProcess::homogeneous(self.process.build()?, dim);
        Ok(MeanRevertingFlow { schedule: self.schedule, noise, clamp_to_support: self.clamp_to_support })
    }
}

/// The noise draw behind a conditional sample, so targets need no inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MeanRevertingFlow {
    pub schedule: Schedule,
    pub noise: ProductProcess,
    /// Snap recorded noise into the support before velocity queries.
    pub clamp_to_support: bool,
}

impl MeanRevertingFlow {
    pub fn new(schedule: Schedule, noise: ProductProcess) -> Self {
        Self { schedule, noise, clamp_to_support: false }
    }

    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    /// Smallest time at which every component velocity is defined.
    pub fn min_time(&self) -> f64 {
        self.schedule.time_for_clock(self.noise.min_time())
    }

    pub fn conditional_sample(&self, x0: &[f64], t: f64, rng: &mut Rng) -> (Vec<f64>, NoiseRecord) {
        let tau = self.schedule.g(t);
        let f = self.schedule.f(t);
        let y = self.noise.sample(tau, rng);
        let xt = x0.iter().zip(&y).map(|(a, b)| f * a + b).collect();
        (xt, NoiseRecord { y })
    }

    pub fn conditional_velocity(&self, x0: &[f64], t: f64, record: &NoiseRecord) -> Result<Vec<f64>> {
        let tau = self.schedule.g(t);
        let df = self.schedule.df(t);
        let dg = self.schedule.dg(t);
        let mut out = Vec::with_capacity(x0.len());
        for (i, (c, (&a, &y))) in self.noise.components.iter().zip(x0.iter().zip(&record.y)).enumerate() {
            let y = if self.clamp_to_support {
                let (lo, hi) = c.support(tau);
                y.clamp(lo, hi)
            } else {
                y
            };
            let v = c.velocity(tau, y).map_err(|e| Error::Component { index: i, source: Box::new(e) })?;
            out.push(df * a + dg * v);
        }
        Ok(out)
    }
}

/// `(1 - t) x0 + t y`.
pub fn linear_path_sample(x0: &[f64], y: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(y).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// `y - x0`.
pub fn linear_target(x0: &[f64], y: &[f64]) -> Vec<f64> {
    x0.iter().zip(y).map(|(a, b)| b - a).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ks_critical_99, ks_two_sample};
    use crate::processes::{KacProcess, UniformMmdProcess, WienerProcess};
    use std::f64::consts::LN_2;

    fn wiener2() -> ProductProcess {
        ProductProcess::homogeneous(Arc::new(WienerProcess::default()), 2)
    }

    #[test]
    fn boundary_conditions() {
        for s in [Schedule::Linear, Schedule::FmQuadratic, Schedule::MmdLog] {
            assert_eq!(s.f(0.0), 1.0);
            assert_eq!(s.g(0.0), 0.0);
            assert_eq!(s.f(1.0), 0.0);
        }
        assert_eq!(Schedule::Linear.g(1.0), 1.0);
        assert_eq!(Schedule::FmQuadratic.g(1.0), 1.0);
        assert!(Schedule::MmdLog.g(1.0).is_infinite());
        let vp = Schedule::vp_default();
        assert_eq!(vp.f(0.0), 1.0);
        assert_eq!(vp.g(0.0), 0.0);
        // h(1) = 10.05, so f(1) = e^{-5.025} and g(1) = 1 - e^{-10.05}.
        assert!((vp.g(1.0) - 1.0).abs() < 1e-4);
        assert!((vp.f(1.0) - (-5.025f64).exp()).abs() < 1e-15);
        assert!(vp.f(1.0) < 1e-2);
    }

    #[test]
    fn schedule_derivatives_match_finite_differences() {
        for s in [Schedule::Linear, Schedule::FmQuadratic, Schedule::MmdLog, Schedule::vp_default()] {
            for &t in &[0.1, 0.4, 0.8] {
                let h = 1e-6;
                let df = (s.f(t + h) - s.f(t - h)) / (2.0 * h);
                let dg = (s.g(t + h) - s.g(t - h)) / (2.0 * h);
                assert!((df - s.df(t)).abs() < 1e-6 * (1.0 + df.abs()), "{s:?}");
                assert!((dg - s.dg(t)).abs() < 1e-6 * (1.0 + dg.abs()), "{s:?}");
            }
        }
    }

    #[test]
    fn product_velocity_examples() {
        let v = product_velocity(&wiener2(), 0.5, &[1.0, -1.0]).unwrap();
        assert_eq!(v, vec![1.0, -1.0]);
        let mixed = ProductProcess::new(vec![
            Arc::new(WienerProcess::default()),
            Arc::new(UniformMmdProcess::new(1.0).unwrap()),
        ]);
        let v = product_velocity(&mixed, LN_2, &[0.5, 0.25]).unwrap();
        assert!((v[0] - 0.5 / (2.0 * LN_2)).abs() < 1e-15);
        assert!((v[1] - 0.25).abs() < 1e-15);
        let err = product_velocity(&mixed, LN_2, &[0.5, 0.9]).unwrap_err();
        assert!(matches!(err, Error::Component { index: 1, .. }));
    }

    #[test]
    fn zero_maps_to_zero() {
        let procs: Vec<Arc<dyn Process1D>> = vec![
            Arc::new(WienerProcess::default()),
            Arc::new(KacProcess::new(9.0, 3.0).unwrap()),
            Arc::new(UniformMmdProcess::new(1.0).unwrap()),
        ];
        let p = ProductProcess::new(procs);
        assert_eq!(product_velocity(&p, 0.3, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn conditional_sample_endpoints_and_determinism() {
        let flow = MeanRevertingFlow::new(Schedule::FmQuadratic, wiener2());
        let x0 = [0.3, -1.2];
        let (x, rec) = flow.conditional_sample(&x0, 0.0, &mut Rng::new(1));
        assert_eq!(x, x0.to_vec());
        assert_eq!(rec.y, vec![0.0, 0.0]);
        let (x, rec) = flow.conditional_sample(&x0, 1.0, &mut Rng::new(1));
        assert_eq!(x, rec.y);
        let (a, _) = flow.conditional_sample(&x0, 0.4, &mut Rng::new(7));
        let (b, _) = flow.conditional_sample(&x0, 0.4, &mut Rng::new(7));
        assert_eq!(a, b);
    }

    #[test]
    fn wiener_fm_target_is_constant_in_time() {
        // Y_{t^2} = t z gives target z - x0 for every t.
        let flow = MeanRevertingFlow::new(Schedule::FmQuadratic, wiener2());
        let x0 = [0.7, -0.2];
        let z = [1.3, 0.4];
        for &t in &[0.1, 0.5, 0.9] {
            let rec = NoiseRecord { y: z.iter().map(|v| t * v).collect() };
            let v = flow.conditional_velocity(&x0, t, &rec).unwrap();
            for i in 0..2 {
                assert!((v[i] - (z[i] - x0[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mmd_log_target_is_uniform_minus_data() {
        let p: Arc<dyn Process1D> = Arc::new(UniformMmdProcess::new(1.0).unwrap());
        let flow = MeanRevertingFlow::new(Schedule::MmdLog, ProductProcess::homogeneous(p, 1));
        let x0 = [0.4];
        let u = -0.6;
        for &t in &[0.05, 0.5, 0.95] {
            // law at clock -ln(1-t) is t * U[-1, 1]
            let rec = NoiseRecord { y: vec![t * u] };
            let v = flow.conditional_velocity(&x0, t, &rec).unwrap();
            assert!((v[0] - (u - x0[0])).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn early_time_limit_matches_mean_derivative() {
        // d/dt E[X_t] at 0 is f'(0) x0 since the noise has mean zero.
        let flow = MeanRevertingFlow::new(Schedule::Linear, ProductProcess::homogeneous(Arc::new(KacProcess::new(2.0, 1.0).unwrap()), 1));
        let x0 = [1.5];
        let v = flow.conditional_velocity(&x0, 0.0, &NoiseRecord { y: vec![0.0] }).unwrap();
        let h = 1e-3;
        let mut rng = Rng::new(3);
        let n = 20_000;
        let mean = (0..n).map(|_| flow.conditional_sample(&x0, h, &mut rng).0[0]).sum::<f64>() / n as f64;
        // Noise at clock h has std at most c h.
        let fd = (mean - x0[0]) / h;
        assert!((fd - v[0]).abs() < 5.0 / (n as f64).sqrt() + 1e-9, "{fd} {}", v[0]);
    }

    #[test]
    fn wiener_product_second_moment() {
        let flow = MeanRevertingFlow::new(Schedule::Linear, wiener2());
        let mut rng = Rng::new(5);
        let t = 0.6;
        let n = 100_000;
        let m = (0..n)
            .map(|_| {
                let (x, _) = flow.conditional_sample(&[0.0, 0.0], t, &mut rng);
                x[0] * x[0] + x[1] * x[1]
            })
            .sum::<f64>()
            / n as f64;
        // ||Y_t||^2 / t is chi-square with 2 dof: mean 2t, variance 4t^2.
        assert!((m - 2.0 * t).abs() < 4.0 * 2.0 * t / (n as f64).sqrt());
    }

    #[test]
    fn vp_schedule_matches_alpha_sigma_form() {
        let vp = Schedule::vp_default();
        let flow = MeanRevertingFlow::new(vp, ProductProcess::homogeneous(Arc::new(WienerProcess::default()), 1));
        let t = 0.3;
        let x0 = [0.8];
        let mut rng = Rng::new(6);
        let n = 20_000;
        let a: Vec<f64> = (0..n).map(|_| flow.conditional_sample(&x0, t, &mut rng).0[0]).collect();
        let sigma = vp.g(t).sqrt();
        let b: Vec<f64> = (0..n).map(|_| vp.f(t) * x0[0] + sigma * rng.gauss()).collect();
        assert!(ks_two_sample(&a, &b) < ks_critical_99(n as f64 / 2.0));
    }

    #[test]
    fn linear_path_helpers() {
        assert_eq!(linear_path_sample(&[0.0, 0.0], &[2.0, 2.0], 0.5), vec![1.0, 1.0]);
        assert_eq!(linear_path_sample(&[3.0], &[5.0], 0.0), vec![3.0]);
        assert_eq!(linear_path_sample(&[3.0], &[5.0], 1.0), vec![5.0]);
        assert_eq!(linear_target(&[1.0, 0.0], &[0.0, 1.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn min_time_respects_wiener_floor() {
        let flow = MeanRevertingFlow::new(Schedule::FmQuadratic, wiener2());
        let t = flow.min_time();
        assert!(flow.schedule.g(t) >= 1e-5);
        assert!((t - 1e-5f64.sqrt()).abs() < 1e-9);
    }
}
