use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Rng};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Spatial input features.
    pub in_dim: usize,
    pub out_dim: usize,
    /// Number of scalar time inputs (1 for a velocity field, 2 for a
    /// two-time generator).
    #[serde(default = "one")]
    pub n_times: usize,
    pub hidden: Vec<usize>,
    /// Sinusoidal features per time input; 0 feeds the raw time instead.
    #[serde(default = "default_embedding")]
    pub time_embedding: usize,
}

fn one() -> usize {
    1
}

fn default_embedding() -> usize {
    64
}

impl MlpConfig {
    pub fn velocity(d: usize, hidden: Vec<usize>, time_embedding: usize) -> Self {
        Self { in_dim: d, out_dim: d, n_times: 1, hidden, time_embedding }
    }

    fn time_features(&self) -> usize {
        self.n_times * self.time_embedding.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.n_times == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.time_embedding % 2 == 1 {
            return Err(Error::Config(format!("time embedding {} must be even", self.time_embedding)));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[sin(2^k pi t), cos(2^k pi t)]` for `k = 0..m/2`.
pub fn sinusoidal_embedding(t: f64, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m);
    let mut freq = PI;
    for _ in 0..m / 2 {
        out.push((freq * t).sin());
        out.push((freq * t).cos());
        freq *= 2.0;
    }
    out
}

/// MLP `(x, t) -> R^out` with SiLU hidden activations and a zero-initialised
/// output layer. Parameters alternate weight `[fan_in, fan_out]` and bias
/// `[1, fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    pub config: MlpConfig,
    pub params: Vec<Array2<f64>>,
}

impl VelocityNet {
    pub fn new(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.in_dim + config.time_features()];
        dims.extend(&config.hidden);
        dims.push(config.out_dim);
        let mut params = Vec::new();
        let layers = dims.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            if l + 1 == layers {
                params.push(Array2::zeros((fan_in, fan_out)));
                params.push(Array2::zeros((1, fan_out)));
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                params.push(Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform_in(-bound, bound)));
                params.push(Array2::from_shape_fn((1, fan_out), |_| rng.uniform_in(-bound, bound)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Time features for a batch, `times` shaped `[batch, n_times]`.
    pub fn time_features(&self, times: &Array2<f64>) -> Result<Array2<f64>> {
        let c = &self.config;
        if times.ncols() != c.n_times {
            return Err(Error::shape("VelocityNet::time_features", format!("expected {} time columns, got {}", c.n_times, times.ncols())));
        }
        if c.time_embedding == 0 {
            return Ok(times.clone());
        }
        let m = c.time_embedding;
        let mut out = Array2::zeros((times.nrows(), c.n_times * m));
        for (i, row) in times.outer_iter().enumerate() {
            for (k, &t) in row.iter().enumerate() {
                for (j, v) in sinusoidal_embedding(t, m).into_iter().enumerate() {
                    out[[i, k * m + j]] = v;
                }
            }
        }
        Ok(out)
    }

    /// Register the parameters as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Recorded forward pass with parameters `params` from [`Self::register`].
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var, times: &Array2<f64>) -> Result<Var> {
        if tape.value(x).ncols() != self.config.in_dim {
            return Err(Error::shape("VelocityNet::forward", format!("expected {} input columns", self.config.in_dim)));
        }
        let tf = tape.constant(self.time_features(times)?);
        let mut h = tape.concat_cols(&[x, tf])?;
        let layers = params.len() / 2;
        for l in 0..layers {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_row_bias(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &Array2<f64>, times: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_with(&self.params, x, times)
    }

    /// Forward pass with externally supplied weights (for example an EMA copy).
    pub fn forward_with(&self, params: &[Array2<f64>], x: &Array2<f64>, times: &Array2<f64>) -> Result<Array2<f64>> {
        let c = &self.config;
        if x.ncols() != c.in_dim || x.nrows() != times.nrows() {
            return Err(Error::shape("VelocityNet::forward", format!("x {:?}, times {:?}", x.dim(), times.dim())));
        }
        let tf = self.time_features(times)?;
        let mut h = Array2::zeros((x.nrows(), c.in_dim + tf.ncols()));
        h.slice_mut(s![.., ..c.in_dim]).assign(x);
        h.slice_mut(s![.., c.in_dim..]).assign(&tf);
        let layers = params.len() / 2;
        for l in 0..layers {
            h = h.dot(&params[2 * l]) + &params[2 * l + 1];
            if l + 1 < layers {
                h.mapv_inplace(|v| v * sigmoid(v));
            }
        }
        Ok(h)
    }

    /// Velocity at a single time shared by the whole batch.
    pub fn forward_at(&self, params: &[Array2<f64>], x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let times = Array2::from_elem((x.nrows(), self.config.n_times), t);
        self.forward_with(params, x, &times)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small(emb: usize) -> VelocityNet {
        VelocityNet::new(MlpConfig::velocity(2, vec![8, 8], emb), &mut Rng::new(3)).unwrap()
    }

    fn randomise(net: &mut VelocityNet, seed: u64) {
        let mut rng = Rng::new(seed);
        for p in &mut net.params {
            p.mapv_inplace(|_| 0.5 * rng.gauss());
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let net = small(16);
        let x = array![[0.3, -1.0], [5.0, 2.0]];
        let t = array![[0.1], [0.9]];
        assert!(net.forward(&x, &t).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn golden_forward_is_deterministic() {
        let mut a = small(16);
        let mut b = small(16);
        randomise(&mut a, 9);
        randomise(&mut b, 9);
        let x = array![[0.3, -1.0]];
        let t = array![[0.25]];
        let ya = a.forward(&x, &t).unwrap();
        assert_eq!(ya, b.forward(&x, &t).unwrap());
        assert!(ya.iter().all(|v| v.is_finite() && *v != 0.0));
    }

    #[test]
    fn batch_equals_rows() {
        let mut net = small(8);
        randomise(&mut net, 4);
        let x = array![[0.3, -1.0], [1.0, 2.0], [-0.5, 0.0]];
        let t = array![[0.1], [0.5], [0.8]];
        let full = net.forward(&x, &t).unwrap();
        for i in 0..3 {
            let xi = x.slice(s![i..i + 1, ..]).to_owned();
            let ti = t.slice(s![i..i + 1, ..]).to_owned();
            assert_eq!(net.forward(&xi, &ti).unwrap().row(0), full.row(i));
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut net = small(0);
        randomise(&mut net, 5);
        let x = array![[0.3, -1.0], [1.0, 2.0]];
        let t = array![[0.1], [0.7]];
        let mut tape = Tape::new();
        let p = net.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = net.forward_tape(&mut tape, &p, xv, &t).unwrap();
        let plain = net.forward(&x, &t).unwrap();
        assert!((tape.value(y) - &plain).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut net = small(4);
        randomise(&mut net, 6);
        let x = array![[0.3, -1.0], [1.0, 2.0], [0.2, 0.1]];
        let t = array![[0.1], [0.7], [0.4]];
        let loss = |net: &VelocityNet| net.forward(&x, &t).unwrap().mapv(|v| v * v).sum();
        let mut tape = Tape::new();
        let p = net.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = net.forward_tape(&mut tape, &p, xv, &t).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, &pv) in p.iter().enumerate() {
            let gk = g.get(pv);
            for idx in 0..net.params[k].len() {
                let mut q = net.clone();
                q.params[k].as_slice_mut().unwrap()[idx] += h;
                let fp = loss(&q);
                q.params[k].as_slice_mut().unwrap()[idx] -= 2.0 * h;
                let fm = loss(&q);
                let fd = (fp - fm) / (2.0 * h);
                let ad = gk.as_slice().unwrap()[idx];
                worst = worst.max((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-2));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn embedding_shape_and_injectivity() {
        let e = sinusoidal_embedding(0.3, 64);
        assert_eq!(e.len(), 64);
        // Lowest pair (sin pi t, cos pi t) alone separates points of [0, 1].
        let grid: Vec<Vec<f64>> = (0..=100).map(|i| sinusoidal_embedding(i as f64 / 100.0, 64)).collect();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                let d: f64 = grid[i].iter().zip(&grid[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(VelocityNet::new(MlpConfig::velocity(2, vec![8], 3), &mut Rng::new(0)).is_err());
        assert!(VelocityNet::new(MlpConfig::velocity(0, vec![8], 4), &mut Rng::new(0)).is_err());
    }
}
