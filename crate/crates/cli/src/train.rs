//! `train`: pretraining, the joint loop and its artefacts.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{fmt_f64, write_json, DirLock};
use qnoise_core::datasets::ZScore;
use qnoise_core::training::{LossParts, TrainState};
use qnoise_core::Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

const DATA_STREAM: u64 = 3;

/// Mean of the loss parts over one logging interval.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub phase: &'static str,
    /// Steps completed in this phase at the end of the interval.
    pub step: u64,
    pub parts: LossParts,
    pub lr_q: f64,
}

#[derive(Debug, Default)]
struct Interval {
    n: u64,
    sum: [f64; 4],
}

impl Interval {
    fn push(&mut self, p: &LossParts) {
        self.n += 1;
        for (s, v) in self.sum.iter_mut().zip([p.total, p.flow, p.an, p.reg]) {
            *s += v;
        }
    }

    fn take(&mut self, phase: &'static str, step: u64, lr_q: f64) -> Option<MetricsRow> {
        if self.n == 0 {
            return None;
        }
        let k = self.n as f64;
        let m = self.sum.map(|s| s / k);
        *self = Interval::default();
        Some(MetricsRow { phase, step, parts: LossParts { total: m[0], flow: m[1], an: m[2], reg: m[3] }, lr_q })
    }
}

struct Sinks {
    metrics: csv::Writer<std::fs::File>,
    timing: csv::Writer<std::fs::File>,
    started: Instant,
}

impl Sinks {
    fn create(dir: &Path) -> CliResult<Self> {
        let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE))?;
        metrics.write_record(["phase", "step", "total", "flow", "an", "reg", "lr_q"])?;
        let mut timing = csv::Writer::from_path(dir.join(TIMING_FILE))?;
        timing.write_record(["phase", "step", "wall_seconds"])?;
        Ok(Self { metrics, timing, started: Instant::now() })
    }

    fn emit(&mut self, row: &MetricsRow) -> CliResult<()> {
        let p = &row.parts;
        self.metrics.write_record([
            row.phase.to_string(),
            row.step.to_string(),
            fmt_f64(p.total),
            fmt_f64(p.flow),
            fmt_f64(p.an),
            fmt_f64(p.reg),
            fmt_f64(row.lr_q),
        ])?;
        self.metrics.flush()?;
        let wall = self.started.elapsed().as_secs_f64();
        self.timing.write_record([row.phase.to_string(), row.step.to_string(), format!("{wall:.3}")])?;
        self.timing.flush()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
    pub out_dir: PathBuf,
}

/// Builds the initial state, including the z-score fit when requested.
pub fn initial_state(cfg: &RunConfig) -> CliResult<TrainState> {
    let mut state = TrainState::new(cfg.training.clone(), cfg.mlp(), cfg.noise()?, cfg.seed)?;
    if cfg.training.zscore {
        let mut rng = Rng::new(cfg.seed).derive(DATA_STREAM);
        let sample = cfg.dataset.sample_batch(cfg.zscore_samples.max(2), &mut rng);
        state.set_zscore(ZScore::fit(&sample)?)?;
    }
    Ok(state)
}

fn save_checkpoint(state: &TrainState, path: &Path) -> CliResult<()> {
    std::fs::write(path, state.to_json()?).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

/// Runs a whole training job into `out_dir`, which is locked for the duration.
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> CliResult<TrainOutcome> {
    let _lock = DirLock::acquire(out_dir)?;
    let mut snapshot = cfg.clone();
    snapshot.output = out_dir.to_path_buf();
    std::fs::write(out_dir.join(RESOLVED_CONFIG_FILE), snapshot.to_toml()?)?;

    let mut state = initial_state(cfg)?;
    let mut sinks = Sinks::create(out_dir)?;
    let mut rows = Vec::new();
    let every = cfg.log_every;
    let target = cfg.dataset;

    let pre = cfg.training.quantile.pretrain_steps;
    if pre > 0 {
        let mut done = 0;
        while done < pre {
            let chunk = every.min(pre - done);
            let parts = state.pretrain_quantile(|n, rng| target.sample_batch(n, rng), chunk)?;
            let mut acc = Interval::default();
            parts.iter().for_each(|p| acc.push(p));
            done += chunk;
            let row = acc.take("pretrain", done, cfg.training.lr_q).expect("non-empty chunk");
            sinks.emit(&row)?;
            rows.push(row);
        }
    }

    let mut acc = Interval::default();
    let mut last_lr_q = 0.0;
    for _ in 0..cfg.training.steps {
        let x = target.sample_batch(cfg.training.batch, &mut state.rng);
        let rep = state.train_step(&x)?;
        acc.push(&rep.parts);
        last_lr_q = rep.lr_q;
        if state.step % every == 0 {
            let row = acc.take("joint", state.step, last_lr_q).expect("interval has a step");
            sinks.emit(&row)?;
            rows.push(row);
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            save_checkpoint(&state, &out_dir.join(format!("checkpoint_{:08}.json", state.step)))?;
        }
    }
    if let Some(row) = acc.take("joint", state.step, last_lr_q) {
        sinks.emit(&row)?;
        rows.push(row);
    }
    save_checkpoint(&state, &out_dir.join(CHECKPOINT_FILE))?;
    write_json(&out_dir.join("summary.json"), &serde_json::json!({
        "steps": state.step,
        "pretrain_steps": state.pretrain_step,
        "state_hash": format!("{:016x}", state.state_hash()),
    }))?;
    Ok(TrainOutcome { state, rows, out_dir: out_dir.to_path_buf() })
}

pub fn cmd_train(config: &Path, out: Option<&Path>) -> CliResult<TrainOutcome> {
    let cfg = RunConfig::load(config)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.clone());
    run_training(&cfg, &dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            r#"
seed = 1
output = "unused"
log_every = 4
[dataset]
name = "grid-gmm"
[network]
hidden = [8]
time_embedding = 4
[training]
batch = 16
steps = 10
{extra}
"#
        ))
        .unwrap()
    }

    #[test]
    fn writes_all_artefacts_and_partial_interval() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&tiny(""), dir.path()).unwrap();
        assert_eq!(out.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 8, 10]);
        for f in [METRICS_FILE, TIMING_FILE, CHECKPOINT_FILE, RESOLVED_CONFIG_FILE, "summary.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(!dir.path().join(crate::io::LOCK_FILE).exists());
        let metrics = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().count(), 4);
    }

    #[test]
    fn pretraining_rows_precede_joint_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("quantile = { pretrain_steps = 6, joint_steps = 0, decay_to_zero_at = 0, freeze_at = 0 }");
        let mut cfg = cfg;
        cfg.latent = Some(crate::config::LatentConfig::Rqs { spline: Default::default() });
        let out = run_training(&cfg, dir.path()).unwrap();
        let phases: Vec<_> = out.rows.iter().map(|r| (r.phase, r.step)).collect();
        assert_eq!(phases, vec![("pretrain", 4), ("pretrain", 6), ("joint", 4), ("joint", 8), ("joint", 10)]);
        assert_eq!(out.state.pretrain_step, 6);
    }

    #[test]
    fn locked_directory_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DirLock::acquire(dir.path()).unwrap();
        assert_eq!(run_training(&tiny(""), dir.path()).unwrap_err().exit_code(), 2);
    }
}
