use clap::{Parser, Subcommand};
use qnoise_cli::baselines::{run_baselines, BaselineBudget};
use qnoise_cli::error::{CliError, CliResult};
use qnoise_cli::eval::cmd_eval;
use qnoise_cli::imm::cmd_imm_demo;
use qnoise_cli::io::write_json;
use qnoise_cli::sample::cmd_sample;
use qnoise_cli::train::cmd_train;
use qnoise_core::datasets::{FunnelReading, ToyTarget};
use qnoise_core::sampling::{Integrator, OdeConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qnoise", version, about = "Flow matching with learned and process-driven noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Output directory (overrides `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, value_enum, default_value = "euler")]
        integrator: IntegratorArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write full trajectories to this CSV.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Score a samples CSV against a toy target; prints JSON.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        /// funnel, grid-gmm, checkerboard or two-atom.
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Four-latent comparison on the funnel.
    Baselines {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        pretrain_steps: Option<u64>,
        /// How to read the funnel's normal parameters: `std` or `variance`.
        #[arg(long, default_value = "std")]
        funnel_reading: String,
    },
    /// Toy inductive moment matching run.
    ImmDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "grid-gmm")]
        dataset: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum IntegratorArg {
    Euler,
    Midpoint,
    Rk4,
}

impl From<IntegratorArg> for Integrator {
    fn from(a: IntegratorArg) -> Self {
        match a {
            IntegratorArg::Euler => Integrator::Euler,
            IntegratorArg::Midpoint => Integrator::Midpoint,
            IntegratorArg::Rk4 => Integrator::Rk4,
        }
    }
}

fn parse_target(name: &str) -> CliResult<ToyTarget> {
    Ok(match name {
        "funnel" => ToyTarget::funnel(),
        "funnel-std" => ToyTarget::Funnel { reading: FunnelReading::Std },
        "grid-gmm" | "grid_gmm" => ToyTarget::GridGmm,
        "checkerboard" => ToyTarget::checkerboard(),
        "two-atom" | "two_atom" => ToyTarget::TwoAtom,
        other => return Err(CliError::config(format!("unknown dataset `{other}`"))),
    })
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| CliError::config(e.to_string()))?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out } => {
            let o = cmd_train(&config, out.as_deref())?;
            eprintln!("trained {} steps into {}", o.state.step, o.out_dir.display());
        }
        Command::Sample { checkpoint, n, steps, integrator, seed, out, trajectories } => {
            let ode = OdeConfig { integrator: integrator.into(), steps };
            let g = cmd_sample(&checkpoint, n, ode, seed, &out, trajectories.as_deref())?;
            eprintln!("wrote {} samples (weights {:016x})", g.points.nrows(), g.weights_hash);
        }
        Command::Eval { samples, dataset, trajectories, seed, out } => {
            let report = cmd_eval(&samples, &parse_target(&dataset)?, trajectories.as_deref(), seed)?;
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            print_json(&report)?;
        }
        Command::Baselines { out, seed, steps, pretrain_steps, funnel_reading } => {
            std::fs::create_dir_all(&out)?;
            let mut budget = BaselineBudget::default();
            budget.steps = steps.unwrap_or(budget.steps);
            budget.pretrain_steps = pretrain_steps.unwrap_or(budget.pretrain_steps);
            budget.reading = match funnel_reading.as_str() {
                "std" => FunnelReading::Std,
                "variance" => FunnelReading::Variance,
                other => return Err(CliError::config(format!("unknown funnel reading `{other}`"))),
            };
            let report = run_baselines(&budget, seed, Some(&out))?;
            print_json(&report)?;
        }
        Command::ImmDemo { out, dataset, steps, n, seed } => {
            let demo = cmd_imm_demo(&parse_target(&dataset)?, steps, n, seed, &out)?;
            eprintln!("final loss {:.5}, energy distance {:.5}", demo.losses.last().copied().unwrap_or(f64::NAN), demo.energy_mmd_sq);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qnoise: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
