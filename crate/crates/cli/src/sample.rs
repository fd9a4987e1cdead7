//! `sample`: generation from a checkpoint.

use crate::error::{CliError, CliResult};
use crate::io::{write_points, write_trajectory};
use qnoise_core::sampling::{generate, Generated, OdeConfig};
use qnoise_core::training::TrainState;
use qnoise_core::Rng;
use std::path::Path;

pub fn load_checkpoint(path: &Path) -> CliResult<TrainState> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    TrainState::from_json(&text).map_err(|e| CliError::config(format!("invalid checkpoint {}: {e}", path.display())))
}

pub fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    ode: OdeConfig,
    seed: u64,
    out: &Path,
    trajectories: Option<&Path>,
) -> CliResult<Generated> {
    ode.validate()?;
    let state = load_checkpoint(checkpoint)?;
    let mut rng = Rng::new(seed);
    let g = generate(&state, n, &ode, &mut rng, trajectories.is_some())?;
    write_points(out, &g.points)?;
    if let Some(p) = trajectories {
        match &g.trajectory {
            Some(t) => write_trajectory(p, t)?,
            None => write_trajectory(
                p,
                &qnoise_core::sampling::Trajectory {
                    times: (0..=ode.steps).map(|k| k as f64 / ode.steps as f64).collect(),
                    states: ndarray::Array3::zeros((ode.steps + 1, 0, state.dim())),
                },
            )?,
        }
    }
    Ok(g)
}
