//! Flow matching losses and the joint latent/velocity training loop.
//!
//! Two modes share one state type. Process mode regresses the conditional
//! velocity of a [`MeanRevertingFlow`]. Quantile mode runs the minibatch OT
//! scheme on the linear path `z = (1 - t) x + t Q(u)` and optionally learns
//! the latent quantile `Q` alongside the velocity.

use crate::autodiff::{clip_grad_norm, params_hash, Adam, AdamConfig, CustomOp, Ema, MlpConfig, Tape, Var, VelocityNet};
use crate::compose::{FlowSpec, MeanRevertingFlow};
use crate::datasets::ZScore;
use crate::error::{Error, Result};
use crate::numerics::{Rng, RngState};
use crate::quantile::{clamp_u, AnalyticQuantile, ProductQuantile, QuantileBatch, QuantileFn};
use crate::transport::{cost_matrix, solve_assignment};
use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub const TRAIN_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingKind {
    Independent,
    #[default]
    Ot,
}

/// Learning-rate plan of the latent quantile, in joint-training steps.
/// `lr_q` is constant for `joint_steps`, decays linearly to zero at
/// `decay_to_zero_at`, and the quantile is frozen from `freeze_at` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileSchedule {
    pub pretrain_steps: u64,
    pub joint_steps: u64,
    pub decay_to_zero_at: u64,
    pub freeze_at: u64,
}

impl Default for QuantileSchedule {
    fn default() -> Self {
        Self { pretrain_steps: 0, joint_steps: 20_000, decay_to_zero_at: 25_000, freeze_at: 25_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr_v: f64,
    pub lr_q: f64,
    /// Weight of the latent-to-data transport loss.
    pub lambda: f64,
    /// Weight of the expected negative log-determinant of the quantile.
    pub lambda_reg: f64,
    pub steps: u64,
    pub quantile: QuantileSchedule,
    pub stop_gradient: bool,
    pub coupling: CouplingKind,
    pub zscore: bool,
    pub ema_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            lr_v: 2e-4,
            lr_q: 1e-3,
            lambda: 5.0,
            lambda_reg: 0.0,
            steps: 100_000,
            quantile: QuantileSchedule::default(),
            stop_gradient: false,
            coupling: CouplingKind::Ot,
            zscore: false,
            ema_decay: 0.999,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr_v >= 0.0 && self.lr_q >= 0.0) {
            return bad(format!("learning rates must be non-negative, got {} and {}", self.lr_v, self.lr_q));
        }
        if !(self.lambda >= 0.0 && self.lambda_reg >= 0.0) {
            return bad(format!("loss weights must be non-negative, got {} and {}", self.lambda, self.lambda_reg));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema decay {} outside [0, 1]", self.ema_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad clip {c} must be positive"));
            }
        }
        let q = &self.quantile;
        if !(q.freeze_at >= q.decay_to_zero_at && q.decay_to_zero_at >= q.joint_steps) {
            return bad(format!(
                "quantile schedule needs freeze_at >= decay_to_zero_at >= joint_steps, got {} / {} / {}",
                q.freeze_at, q.decay_to_zero_at, q.joint_steps
            ));
        }
        Ok(())
    }
}

/// `(lr_v, lr_q)` at joint-training step `step`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> (f64, f64) {
    let q = &cfg.quantile;
    let lr_q = if step >= q.freeze_at || step >= q.decay_to_zero_at {
        0.0
    } else if step < q.joint_steps {
        cfg.lr_q
    } else {
        cfg.lr_q * (q.decay_to_zero_at - step) as f64 / (q.decay_to_zero_at - q.joint_steps) as f64
    };
    (cfg.lr_v, lr_q)
}

/// Latent law `Q(U)` with `U` uniform on the open cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Latent {
    Analytic { dim: usize, quantile: AnalyticQuantile },
    Learned { quantile: ProductQuantile },
}

impl Latent {
    pub fn dim(&self) -> usize {
        match self {
            Latent::Analytic { dim, .. } => *dim,
            Latent::Learned { quantile } => quantile.dim(),
        }
    }

    pub fn learned(&self) -> Option<&ProductQuantile> {
        match self {
            Latent::Learned { quantile } => Some(quantile),
            Latent::Analytic { .. } => None,
        }
    }

    pub fn learned_mut(&mut self) -> Option<&mut ProductQuantile> {
        match self {
            Latent::Learned { quantile } => Some(quantile),
            Latent::Analytic { .. } => None,
        }
    }

    /// Clamped uniform draws, `[n, d]`.
    pub fn draw_u(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.dim()), || clamp_u(rng.uniform()))
    }

    pub fn eval(&self, u: &Array2<f64>) -> Result<QuantileBatch> {
        match self {
            Latent::Learned { quantile } => quantile.eval_batch(u),
            Latent::Analytic { dim, quantile } => {
                if u.ncols() != *dim {
                    return Err(Error::shape("Latent::eval", format!("expected {dim} columns, got {}", u.ncols())));
                }
                let mut values = Array2::zeros(u.dim());
                let mut log_derivs = Array2::zeros(u.dim());
                for ((i, j), &p) in u.indexed_iter() {
                    values[[i, j]] = quantile.eval(p)?;
                    log_derivs[[i, j]] = quantile.deriv(p)?.ln();
                }
                Ok(QuantileBatch { values, log_derivs })
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let u = self.draw_u(n, rng);
        Ok(self.eval(&u)?.values)
    }
}

/// Noise side of a training run.
#[derive(Debug, Clone)]
pub enum Noise {
    Quantile(Latent),
    Process { spec: FlowSpec, flow: MeanRevertingFlow },
}

impl Noise {
    pub fn process(spec: FlowSpec, dim: usize) -> Result<Self> {
        Ok(Noise::Process { spec, flow: spec.build(dim)? })
    }

    pub fn dim(&self) -> usize {
        match self {
            Noise::Quantile(l) => l.dim(),
            Noise::Process { flow, .. } => flow.dim(),
        }
    }

    pub fn latent(&self) -> Option<&Latent> {
        match self {
            Noise::Quantile(l) => Some(l),
            Noise::Process { .. } => None,
        }
    }

    /// Draws from the law at `t = 1` that generation starts from.
    pub fn sample_terminal(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        match self {
            Noise::Quantile(l) => l.sample(n, rng),
            Noise::Process { flow, .. } => {
                let tau = flow.schedule.g(1.0);
                let mut out = Array2::zeros((n, flow.dim()));
                for mut row in out.outer_iter_mut() {
                    for (o, y) in row.iter_mut().zip(flow.noise.sample(tau, rng)) {
                        *o = y;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Tape node for a product quantile: input is the flat parameter row
/// `[1, P]`, output is `[values | log-derivatives]`, shape `[B, 2d]`.
#[derive(Debug)]
struct QuantileOp {
    q: ProductQuantile,
    u: Array2<f64>,
}

impl CustomOp for QuantileOp {
    fn backward(&self, _inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>) -> Result<Vec<Option<Array2<f64>>>> {
        let d = self.q.dim();
        let gq = grad.slice(s![.., ..d]).to_owned();
        let gl = grad.slice(s![.., d..]).to_owned();
        let flat = self.q.backward_batch(&self.u, &gq, &gl)?;
        let n = flat.len();
        let g = Array2::from_shape_vec((1, n), flat).map_err(|e| Error::Tape(e.to_string()))?;
        Ok(vec![Some(g)])
    }
}

/// Latent values and log-derivatives recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub y: Var,
    pub logd: Var,
    /// Flat quantile parameters when they are trainable.
    pub phi: Option<Var>,
}

pub fn record_latent(tape: &mut Tape, latent: &Latent, u: &Array2<f64>) -> Result<LatentVars> {
    let batch = latent.eval(u)?;
    match latent {
        Latent::Learned { quantile } if !quantile.frozen => {
            let d = quantile.dim();
            let flat = quantile.flat_params();
            let p = flat.len();
            let phi = tape.leaf(Array2::from_shape_vec((1, p), flat).map_err(|e| Error::Tape(e.to_string()))?);
            let value = concatenate(Axis(1), &[batch.values.view(), batch.log_derivs.view()])
                .map_err(|e| Error::shape("record_latent", e.to_string()))?;
            let op = QuantileOp { q: quantile.clone(), u: u.clone() };
            let out = tape.custom(Box::new(op), &[phi], value);
            let y = tape.slice_cols(out, 0, d)?;
            let logd = tape.slice_cols(out, d, 2 * d)?;
            Ok(LatentVars { y, logd, phi: Some(phi) })
        }
        _ => {
            let y = tape.constant(batch.values);
            let logd = tape.constant(batch.log_derivs);
            Ok(LatentVars { y, logd, phi: None })
        }
    }
}

fn check_rows(op: &'static str, tape: &Tape, a: Var, b: Var, t: &Array2<f64>) -> Result<()> {
    let (ra, rb) = (tape.value(a).nrows(), tape.value(b).nrows());
    if ra != rb || t.nrows() != ra || t.ncols() != 1 {
        return Err(Error::shape(op, format!("batch sizes {ra}, {rb} and times {:?}", t.dim())));
    }
    Ok(())
}

/// Per-row `||y - x||^2`, detached from `y` and `x` when `stop_gradient`.
pub fn square_term(tape: &mut Tape, x_hat: Var, y: Var, stop_gradient: bool) -> Result<Var> {
    let diff = tape.sub(y, x_hat)?;
    let diff = if stop_gradient { tape.detach(diff) } else { diff };
    Ok(tape.row_sq_norm(diff))
}

/// `z = (1 - t) x + t y` for a time column `t`.
pub fn linear_point(tape: &mut Tape, x_hat: Var, y: Var, t: &Array2<f64>) -> Result<Var> {
    let one_minus = tape.constant(t.mapv(|v| 1.0 - v));
    let tc = tape.constant(t.clone());
    let a = tape.mul_col(x_hat, one_minus)?;
    let b = tape.mul_col(y, tc)?;
    tape.add(a, b)
}

/// Mean of `||v||^2 - 2 <v, y - x> + ||y - x||^2` at `z = (1 - t) x + t y`.
pub fn loss_ot_cfm(
    tape: &mut Tape,
    net: &VelocityNet,
    theta: &[Var],
    x_hat: Var,
    y: Var,
    t: &Array2<f64>,
    stop_gradient: bool,
) -> Result<Var> {
    check_rows("loss_ot_cfm", tape, x_hat, y, t)?;
    let z = linear_point(tape, x_hat, y, t)?;
    let v = net.forward_tape(tape, theta, z, t)?;
    let diff = tape.sub(y, x_hat)?;
    let vv = tape.row_sq_norm(v);
    let vd = tape.row_dot(v, diff)?;
    let vd = tape.scale(vd, -2.0);
    let sq = square_term(tape, x_hat, y, stop_gradient)?;
    let acc = tape.add(vv, vd)?;
    let acc = tape.add(acc, sq)?;
    Ok(tape.mean(acc))
}

/// `(1/B) sum_j ||x_j - y_j||^2` on an already coupled batch.
pub fn loss_an(tape: &mut Tape, x_hat: Var, y: Var) -> Result<Var> {
    let diff = tape.sub(y, x_hat)?;
    let sq = tape.row_sq_norm(diff);
    Ok(tape.mean(sq))
}

/// Batch mean of `-sum_i log Q_i'(u_i)`.
pub fn neg_logdet(tape: &mut Tape, logd: Var) -> Var {
    let d = tape.value(logd).ncols() as f64;
    let m = tape.mean(logd);
    tape.scale(m, -d)
}

/// Plain-value `loss_an`.
pub fn loss_an_value(x_hat: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x_hat.dim() != y.dim() {
        return Err(Error::shape("loss_an", format!("{:?} vs {:?}", x_hat.dim(), y.dim())));
    }
    let n = x_hat.nrows().max(1) as f64;
    Ok((y - x_hat).mapv(|v| v * v).sum() / n)
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    /// Flow matching term (OT-CFM in quantile mode, CFM in process mode).
    pub flow: f64,
    pub an: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointWeights {
    pub lambda: f64,
    pub lambda_reg: f64,
    pub stop_gradient: bool,
    /// Include the velocity term; off for quantile pretraining.
    pub include_flow: bool,
}

impl JointWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { lambda: cfg.lambda, lambda_reg: cfg.lambda_reg, stop_gradient: cfg.stop_gradient, include_flow: true }
    }
}

/// Loss values with gradients for the network and (if trainable) the flat
/// quantile parameters.
#[derive(Debug, Clone)]
pub struct JointEval {
    pub parts: LossParts,
    pub grad_theta: Vec<Array2<f64>>,
    pub grad_phi: Option<Vec<f64>>,
}

/// `L_OT-CFM + lambda L_AN + lambda_reg E[-log det J_Q]` on a coupled batch,
/// with the network evaluated at parameters `theta`.
pub fn loss_joint(
    net: &VelocityNet,
    theta: &[Array2<f64>],
    latent: &Latent,
    x_hat: &Array2<f64>,
    u: &Array2<f64>,
    t: &Array2<f64>,
    w: JointWeights,
) -> Result<JointEval> {
    if x_hat.dim() != u.dim() {
        return Err(Error::shape("loss_joint", format!("data {:?} vs uniforms {:?}", x_hat.dim(), u.dim())));
    }
    let mut tape = Tape::new();
    let theta_vars: Vec<Var> = if w.include_flow { theta.iter().map(|p| tape.leaf(p.clone())).collect() } else { Vec::new() };
    let xv = tape.constant(x_hat.clone());
    let lv = record_latent(&mut tape, latent, u)?;
    let an = loss_an(&mut tape, xv, lv.y)?;
    let reg = neg_logdet(&mut tape, lv.logd);
    let an_w = tape.scale(an, w.lambda);
    let reg_w = tape.scale(reg, w.lambda_reg);
    let mut total = tape.add(an_w, reg_w)?;
    let mut flow_val = 0.0;
    if w.include_flow {
        let flow = loss_ot_cfm(&mut tape, net, &theta_vars, xv, lv.y, t, w.stop_gradient)?;
        flow_val = tape.scalar(flow);
        total = tape.add(total, flow)?;
    }
    let parts = LossParts { total: tape.scalar(total), flow: flow_val, an: tape.scalar(an), reg: tape.scalar(reg) };
    let grads = tape.backward(total)?;
    let grad_theta = theta_vars.iter().map(|&v| grads.get(v)).collect();
    let grad_phi = lv.phi.map(|p| grads.get(p).into_iter().collect());
    Ok(JointEval { parts, grad_theta, grad_phi })
}

/// Conditional flow matching inputs for one batch.
#[derive(Debug, Clone)]
pub struct CfmBatch {
    pub xt: Array2<f64>,
    pub t: Array2<f64>,
    pub target: Array2<f64>,
}

/// Draws `t` uniform on `[t_floor, 1)` per row, `x_t` from the flow and
/// the conditional velocity at `(x_t, t)`.
pub fn cfm_batch(flow: &MeanRevertingFlow, x0: &Array2<f64>, rng: &mut Rng) -> Result<CfmBatch> {
    if x0.ncols() != flow.dim() {
        return Err(Error::shape("cfm_batch", format!("data has {} columns, flow has {}", x0.ncols(), flow.dim())));
    }
    let t_floor = flow.min_time();
    let n = x0.nrows();
    let mut xt = Array2::zeros(x0.dim());
    let mut target = Array2::zeros(x0.dim());
    let mut t = Array2::zeros((n, 1));
    for i in 0..n {
        let ti = t_floor + (1.0 - t_floor) * rng.uniform();
        let row = x0.row(i).to_vec();
        let (x, rec) = flow.conditional_sample(&row, ti, rng);
        let v = flow.conditional_velocity(&row, ti, &rec)?;
        for j in 0..x.len() {
            xt[[i, j]] = x[j];
            target[[i, j]] = v[j];
        }
        t[[i, 0]] = ti;
    }
    Ok(CfmBatch { xt, t, target })
}

/// Mean `||v_theta(x_t, t) - v_t(x_t | x_0)||^2`.
pub fn loss_cfm(tape: &mut Tape, net: &VelocityNet, theta: &[Var], batch: &CfmBatch) -> Result<Var> {
    let x = tape.constant(batch.xt.clone());
    let target = tape.constant(batch.target.clone());
    let v = net.forward_tape(tape, theta, x, &batch.t)?;
    let diff = tape.sub(v, target)?;
    let sq = tape.row_sq_norm(diff);
    Ok(tape.mean(sq))
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Step index the report belongs to (before the increment).
    pub step: u64,
    pub parts: LossParts,
    pub lr_v: f64,
    pub lr_q: f64,
    /// Network gradient norm before clipping.
    pub grad_norm: f64,
    /// `x_hat[j] = x[permutation[j]]`, shared by every loss term.
    pub permutation: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub net: VelocityNet,
    pub adam_v: Adam,
    pub ema: Ema,
    pub noise: Noise,
    pub adam_q: Adam,
    /// Joint-training steps taken.
    pub step: u64,
    pub pretrain_step: u64,
    pub rng: Rng,
    pub zscore: Option<ZScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseCheckpoint {
    Quantile { latent: Latent },
    Process { spec: FlowSpec, dim: usize },
}

/// Serialised [`TrainState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub net: VelocityNet,
    pub adam_v: Adam,
    pub ema: Ema,
    pub noise: NoiseCheckpoint,
    pub adam_q: Adam,
    pub step: u64,
    pub pretrain_step: u64,
    pub rng: RngState,
    pub zscore: Option<ZScore>,
}

fn permute_rows(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    x.select(Axis(0), perm)
}

impl TrainState {
    pub fn new(config: TrainConfig, net_config: MlpConfig, noise: Noise, seed: u64) -> Result<Self> {
        config.validate()?;
        if net_config.in_dim != noise.dim() || net_config.out_dim != noise.dim() || net_config.n_times != 1 {
            return Err(Error::Config(format!(
                "network maps {} -> {} with {} time inputs but the noise has dimension {}",
                net_config.in_dim,
                net_config.out_dim,
                net_config.n_times,
                noise.dim()
            )));
        }
        let root = Rng::new(seed);
        let net = VelocityNet::new(net_config, &mut root.derive(0))?;
        let ema = Ema::new(config.ema_decay, &net.params);
        let adam = |lr| Adam::new(AdamConfig { lr, ..AdamConfig::default() });
        Ok(Self {
            adam_v: adam(config.lr_v),
            adam_q: adam(config.lr_q),
            config,
            net,
            ema,
            noise,
            step: 0,
            pretrain_step: 0,
            rng: root.derive(1),
            zscore: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    /// Weights used for generation.
    pub fn inference_params(&self) -> &[Array2<f64>] {
        &self.ema.shadow
    }

    pub fn set_zscore(&mut self, z: ZScore) -> Result<()> {
        if z.mean.len() != self.dim() {
            return Err(Error::shape("TrainState::set_zscore", format!("{} coordinates for dimension {}", z.mean.len(), self.dim())));
        }
        self.zscore = Some(z);
        Ok(())
    }

    fn normalise(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() || x.nrows() == 0 {
            return Err(Error::shape("train_step", format!("data batch {:?} for dimension {}", x.dim(), self.dim())));
        }
        Ok(match &self.zscore {
            Some(z) => z.apply(x),
            None => x.clone(),
        })
    }

    /// Hash of network, EMA and quantile parameters.
    pub fn state_hash(&self) -> u64 {
        let mut all: Vec<Array2<f64>> = self.net.params.clone();
        all.extend(self.ema.shadow.iter().cloned());
        if let Some(q) = self.noise.latent().and_then(Latent::learned) {
            let flat = q.flat_params();
            all.push(Array2::from_shape_vec((1, flat.len()), flat).expect("row vector"));
        }
        params_hash(&all)
    }

    fn apply_phi(&mut self, grad: Vec<f64>, lr: f64) -> Result<()> {
        let Some(q) = self.noise_latent_mut().and_then(Latent::learned_mut) else {
            return Ok(());
        };
        if q.frozen || lr == 0.0 {
            return Ok(());
        }
        let p = grad.len();
        let mut params = vec![Array2::from_shape_vec((1, p), q.flat_params()).map_err(|e| Error::Tape(e.to_string()))?];
        let grads = vec![Array2::from_shape_vec((1, p), grad).map_err(|e| Error::Tape(e.to_string()))?];
        self.adam_q.update(&mut params, &grads, lr)?;
        let q = self.noise_latent_mut().and_then(Latent::learned_mut).expect("checked above");
        q.set_flat_params(params[0].as_slice().expect("contiguous"))
    }

    fn noise_latent_mut(&mut self) -> Option<&mut Latent> {
        match &mut self.noise {
            Noise::Quantile(l) => Some(l),
            Noise::Process { .. } => None,
        }
    }

    fn check_finite(&self, parts: &LossParts, context: &str) -> Result<()> {
        if parts.total.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: format!("{context} (flow {}, an {}, reg {})", parts.flow, parts.an, parts.reg),
                step: self.step,
            })
        }
    }

    /// One optimisation step on the raw data batch `x`.
    pub fn train_step(&mut self, x: &Array2<f64>) -> Result<StepReport> {
        let x = self.normalise(x)?;
        let step = self.step;
        let (lr_v, lr_q) = lr_schedule(step, &self.config);
        let (parts, mut grad_theta, grad_phi, permutation) = match &mut self.noise {
            Noise::Process { flow, .. } => {
                let batch = cfm_batch(flow, &x, &mut self.rng)?;
                let mut tape = Tape::new();
                let theta = self.net.register(&mut tape);
                let loss = loss_cfm(&mut tape, &self.net, &theta, &batch)?;
                let value = tape.scalar(loss);
                let grads = tape.backward(loss)?;
                let parts = LossParts { total: value, flow: value, an: 0.0, reg: 0.0 };
                (parts, theta.iter().map(|&v| grads.get(v)).collect::<Vec<_>>(), None, None)
            }
            Noise::Quantile(latent) => {
                if let Some(q) = latent.learned_mut() {
                    if step >= self.config.quantile.freeze_at {
                        q.frozen = true;
                    }
                }
                let b = x.nrows();
                let u = latent.draw_u(b, &mut self.rng);
                let t = Array2::from_shape_simple_fn((b, 1), || self.rng.uniform());
                let perm = match self.config.coupling {
                    CouplingKind::Independent => (0..b).collect::<Vec<_>>(),
                    CouplingKind::Ot => {
                        let y = latent.eval(&u)?.values;
                        solve_assignment(cost_matrix(x.view(), y.view())?.view())?.inverse
                    }
                };
                let x_hat = permute_rows(&x, &perm);
                let eval = loss_joint(&self.net, &self.net.params, latent, &x_hat, &u, &t, JointWeights::from_config(&self.config))?;
                (eval.parts, eval.grad_theta, eval.grad_phi, Some(perm))
            }
        };
        self.check_finite(&parts, "training loss")?;
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut grad_theta, c),
            None => clip_grad_norm(&mut grad_theta, f64::INFINITY),
        };
        self.adam_v.update(&mut self.net.params, &grad_theta, lr_v)?;
        if let Some(g) = grad_phi {
            self.apply_phi(g, lr_q)?;
        }
        self.ema.update(&self.net.params)?;
        self.step += 1;
        Ok(StepReport { step, parts, lr_v, lr_q, grad_norm, permutation })
    }

    /// Fits the learned quantile alone to data drawn by `data`, minimising
    /// `lambda L_AN + lambda_reg E[-log det]` under per-batch OT couplings.
    pub fn pretrain_quantile<F>(&mut self, mut data: F, steps: u64) -> Result<Vec<LossParts>>
    where
        F: FnMut(usize, &mut Rng) -> Array2<f64>,
    {
        if steps == 0 {
            return Ok(Vec::new());
        }
        match self.noise.latent() {
            Some(Latent::Learned { quantile }) if !quantile.frozen => {}
            _ => return Err(Error::Config("pretraining needs a trainable learned latent".into())),
        }
        let w = JointWeights { include_flow: false, ..JointWeights::from_config(&self.config) };
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let raw = data(self.config.batch, &mut self.rng);
            let x = self.normalise(&raw)?;
            let latent = self.noise.latent().expect("checked above");
            let u = latent.draw_u(x.nrows(), &mut self.rng);
            let y = latent.eval(&u)?.values;
            let perm = solve_assignment(cost_matrix(x.view(), y.view())?.view())?.inverse;
            let x_hat = permute_rows(&x, &perm);
            let t = Array2::zeros((x.nrows(), 1));
            let eval = loss_joint(&self.net, &[], latent, &x_hat, &u, &t, w)?;
            self.check_finite(&eval.parts, "pretraining loss")?;
            if let Some(g) = eval.grad_phi {
                self.apply_phi(g, self.config.lr_q)?;
            }
            self.pretrain_step += 1;
            out.push(eval.parts);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> TrainCheckpoint {
        let noise = match &self.noise {
            Noise::Quantile(l) => NoiseCheckpoint::Quantile { latent: l.clone() },
            Noise::Process { spec, flow } => NoiseCheckpoint::Process { spec: *spec, dim: flow.dim() },
        };
        TrainCheckpoint {
            version: TRAIN_CHECKPOINT_VERSION,
            config: self.config.clone(),
            net: self.net.clone(),
            adam_v: self.adam_v.clone(),
            ema: self.ema.clone(),
            noise,
            adam_q: self.adam_q.clone(),
            step: self.step,
            pretrain_step: self.pretrain_step,
            rng: self.rng.state(),
            zscore: self.zscore.clone(),
        }
    }

    pub fn from_checkpoint(c: TrainCheckpoint) -> Result<Self> {
        if c.version != TRAIN_CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported training checkpoint version {}", c.version)));
        }
        c.config.validate()?;
        c.net.config.validate()?;
        let noise = match c.noise {
            NoiseCheckpoint::Quantile { latent } => Noise::Quantile(latent),
            NoiseCheckpoint::Process { spec, dim } => Noise::process(spec, dim)?,
        };
        Ok(Self {
            config: c.config,
            net: c.net,
            adam_v: c.adam_v,
            ema: c.ema,
            noise,
            adam_q: c.adam_q,
            step: c.step,
            pretrain_step: c.pretrain_step,
            rng: Rng::from_state(&c.rng),
            zscore: c.zscore,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::Config(format!("training checkpoint: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainCheckpoint = serde_json::from_str(s).map_err(|e| Error::Config(format!("training checkpoint: {e}")))?;
        Self::from_checkpoint(c)
    }
}
