//! Generation by integrating the reverse flow ODE `dx/ds = -v(x, 1 - s)`
//! from noise at `s = 0` to data at `s = 1`.

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::autodiff::params_hash;
use crate::training::{Noise, TrainState};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Euler,
    Midpoint,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeConfig {
    pub integrator: Integrator,
    pub steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { integrator: Integrator::Euler, steps: 100 }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("ODE steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// States on the uniform grid `s_k = k / n`, shape `[n + 1, batch, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Array3<f64>,
}

impl Trajectory {
    pub fn last(&self) -> Array2<f64> {
        self.states.index_axis(Axis(0), self.states.len_of(Axis(0)) - 1).to_owned()
    }
}

/// Integrates `dx/ds = -v(x, 1 - s)`, where `v(x, t)` is a velocity in the
/// training time convention (data at `t = 0`).
pub fn integrate<F>(v: F, y0: &Array2<f64>, cfg: &OdeConfig) -> Result<Trajectory>
where
    F: Fn(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    let n = cfg.steps;
    let h = 1.0 / n as f64;
    let rhs = |x: &Array2<f64>, s: f64| -> Result<Array2<f64>> { Ok(-v(x, 1.0 - s)?) };
    let (b, d) = y0.dim();
    let mut states = Array3::zeros((n + 1, b, d));
    states.index_axis_mut(Axis(0), 0).assign(y0);
    let mut x = y0.clone();
    let times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
    for k in 0..n {
        let s = times[k];
        x = match cfg.integrator {
            Integrator::Euler => &x + &(rhs(&x, s)? * h),
            Integrator::Midpoint => {
                let k1 = rhs(&x, s)?;
                let mid = &x + &(&k1 * (0.5 * h));
                &x + &(rhs(&mid, s + 0.5 * h)? * h)
            }
            Integrator::Rk4 => {
                let k1 = rhs(&x, s)?;
                let k2 = rhs(&(&x + &(&k1 * (0.5 * h))), s + 0.5 * h)?;
                let k3 = rhs(&(&x + &(&k2 * (0.5 * h))), s + 0.5 * h)?;
                let k4 = rhs(&(&x + &(&k3 * h)), s + h)?;
                &x + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (h / 6.0))
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "ODE state".into(), step: k as u64 + 1 });
        }
        states.index_axis_mut(Axis(0), k + 1).assign(&x);
    }
    Ok(Trajectory { times, states })
}

/// Draws from the terminal (`t = 1`) law of a model.
pub fn sample_latent(noise: &Noise, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    noise.sample_terminal(n, rng)
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Samples in data coordinates.
    pub points: Array2<f64>,
    /// Trajectory in data coordinates when requested.
    pub trajectory: Option<Trajectory>,
    /// Hash of the network weights that produced the samples.
    pub weights_hash: u64,
}

/// Integrates `count` latent draws with the EMA weights of `state`.
pub fn generate(state: &TrainState, count: usize, cfg: &OdeConfig, rng: &mut Rng, keep_trajectory: bool) -> Result<Generated> {
    cfg.validate()?;
    let params = state.inference_params();
    let weights_hash = params_hash(params);
    let d = state.dim();
    if count == 0 {
        return Ok(Generated { points: Array2::zeros((0, d)), trajectory: None, weights_hash });
    }
    let y0 = sample_latent(&state.noise, count, rng)?;
    let net = &state.net;
    let mut traj = integrate(|x, t| net.forward_at(params, x, t), &y0, cfg)?;
    if let Some(z) = &state.zscore {
        for k in 0..traj.states.len_of(Axis(0)) {
            let back = z.invert(&traj.states.index_axis(Axis(0), k).to_owned());
            traj.states.index_axis_mut(Axis(0), k).assign(&back);
        }
    }
    let points = traj.last();
    Ok(Generated { points, trajectory: keep_trajectory.then_some(traj), weights_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::MlpConfig;
    use crate::quantile::AnalyticQuantile;
    use crate::training::{Latent, TrainConfig};
    use ndarray::array;

    fn linear_field(x: &Array2<f64>, _t: f64) -> Result<Array2<f64>> {
        Ok(x.clone())
    }

    fn cfg(integrator: Integrator, steps: usize) -> OdeConfig {
        OdeConfig { integrator, steps }
    }

    #[test]
    fn zero_field_keeps_the_start() {
        let y0 = array![[0.3, -1.0], [2.0, 0.5]];
        let tr = integrate(|x, _| Ok(Array2::zeros(x.dim())), &y0, &cfg(Integrator::Rk4, 7)).unwrap();
        for k in 0..=7 {
            assert_eq!(tr.states.index_axis(Axis(0), k), y0);
        }
        assert_eq!(tr.times.len(), 8);
        assert_eq!(tr.times[0], 0.0);
        assert_eq!(tr.times[7], 1.0);
    }

    #[test]
    fn euler_on_linear_field_is_the_closed_recursion() {
        for n in [1, 5, 50] {
            let tr = integrate(linear_field, &array![[1.0]], &cfg(Integrator::Euler, n)).unwrap();
            let want = (1.0 - 1.0 / n as f64).powi(n as i32);
            assert!((tr.last()[[0, 0]] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let err = |n: usize| {
            let tr = integrate(linear_field, &array![[1.0]], &cfg(Integrator::Rk4, n)).unwrap();
            (tr.last()[[0, 0]] - (-1f64).exp()).abs()
        };
        let (e10, e20, e40) = (err(10), err(20), err(40));
        // Least-squares slope of log error against log n.
        let xs = [10f64.ln(), 20f64.ln(), 40f64.ln()];
        let ys = [e10.ln(), e20.ln(), e40.ln()];
        let mx = xs.iter().sum::<f64>() / 3.0;
        let my = ys.iter().sum::<f64>() / 3.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope + 4.0).abs() < 0.1, "{slope}");
    }

    #[test]
    fn integrators_agree_on_a_smooth_field() {
        let field = |x: &Array2<f64>, t: f64| Ok(x.mapv(|v| (v + t).sin()));
        let y0 = array![[0.4, -1.2]];
        let n = 50;
        let e = integrate(field, &y0, &cfg(Integrator::Euler, n)).unwrap().last();
        let m = integrate(field, &y0, &cfg(Integrator::Midpoint, n)).unwrap().last();
        let r = integrate(field, &y0, &cfg(Integrator::Rk4, n)).unwrap().last();
        let h = 1.0 / n as f64;
        assert!((&e - &r).iter().all(|d| d.abs() < 10.0 * h));
        assert!((&m - &r).iter().all(|d| d.abs() < 10.0 * h * h));
    }

    #[test]
    fn one_euler_step_recovers_the_data_point() {
        let x0 = array![[0.25, -3.0]];
        let y = array![[1.5, 2.0]];
        let target = &y - &x0;
        let tr = integrate(|_, _| Ok(target.clone()), &y, &cfg(Integrator::Euler, 1)).unwrap();
        assert_eq!(tr.last(), x0);
    }

    #[test]
    fn non_finite_state_aborts_with_step() {
        let field = |x: &Array2<f64>, _t: f64| Ok(x.mapv(|v| v * 1e200));
        let err = integrate(field, &array![[1e200]], &cfg(Integrator::Euler, 4)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }));
    }

    fn gaussian_state() -> TrainState {
        let latent = Latent::Analytic { dim: 2, quantile: AnalyticQuantile::gaussian() };
        TrainState::new(TrainConfig::default(), MlpConfig::velocity(2, vec![8], 4), Noise::Quantile(latent), 3).unwrap()
    }

    #[test]
    fn untrained_model_returns_latent_draws() {
        let st = gaussian_state();
        let mut rng = Rng::new(1);
        let g = generate(&st, 500, &OdeConfig::default(), &mut rng, true).unwrap();
        let y0 = g.trajectory.as_ref().unwrap().states.index_axis(Axis(0), 0).to_owned();
        assert_eq!(g.points, y0);
        assert_eq!(g.weights_hash, params_hash(&st.ema.shadow));
        let empty = generate(&st, 0, &OdeConfig::default(), &mut rng, false).unwrap();
        assert_eq!(empty.points.dim(), (0, 2));
    }

    #[test]
    fn gaussian_latent_covariance_is_identity() {
        let st = gaussian_state();
        let mut rng = Rng::new(2);
        let n = 20_000;
        let y = sample_latent(&st.noise, n, &mut rng).unwrap();
        let band = 4.0 * (2.0 / n as f64).sqrt();
        for i in 0..2 {
            for j in 0..2 {
                let c = y.column(i).dot(&y.column(j)) / n as f64;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c - want).abs() < band, "{i}{j}: {c}");
            }
        }
    }

    #[test]
    fn latent_draws_are_reproducible() {
        let st = gaussian_state();
        let a = sample_latent(&st.noise, 10, &mut Rng::new(9)).unwrap();
        let back = TrainState::from_json(&st.to_json().unwrap()).unwrap();
        let b = sample_latent(&back.noise, 10, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }
}
