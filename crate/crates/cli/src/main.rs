//! `lagkit`: data generation, training, prediction, control, evaluation and
//! export, driven by one JSON configuration with flag overrides.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
//! abort, 4 actuation deficiency.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Target;
use crate::config::{RunConfig, SystemSpec};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "lagkit", version, allow_negative_numbers = true, about = "Constrained Lagrangian dynamics: learning and control")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// pendulum, cartpole or acrobot.
    #[arg(long, global = true)]
    system: Option<String>,
    #[arg(long, global = true)]
    actuators: Option<usize>,
    #[arg(long, global = true)]
    h: Option<f64>,
    #[arg(long, global = true)]
    nu: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    lambda_d: Option<f64>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    kp: Option<f64>,
    #[arg(long, global = true)]
    kd: Option<f64>,
    #[arg(long, global = true)]
    num_sequences: Option<usize>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Parameters file, or `analytic` for the ground-truth model.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of state sequences.
    GenData,
    /// Fit dynamics parameters to the training split.
    Train {
        /// Continue from a params file and its checkpoint sidecar.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out from the first frames of one sequence.
    Predict {
        /// Dataset index; the first validation sequence by default.
        #[arg(long)]
        sequence: Option<usize>,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        /// Also write the predicted frames as PGM images.
        #[arg(long)]
        render: bool,
    },
    /// Drive the system to a target with energy shaping.
    Control {
        /// Target state as comma-separated keypoint coordinates.
        #[arg(long, conflicts_with = "target_frame", required_unless_present = "target_frame")]
        target_state: Option<String>,
        /// Target given as a rendered PGM frame.
        #[arg(long)]
        target_frame: Option<PathBuf>,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        /// Start state; the hanging configuration nudged sideways by default.
        #[arg(long)]
        start_state: Option<String>,
    },
    /// VPT over the validation split, energy traces and input fields.
    Eval,
    /// Render dataset sequences to PGM frames.
    Export {
        /// Dataset index; all validation sequences by default.
        #[arg(long)]
        sequence: Option<usize>,
        /// Also write the per-keypoint blob maps.
        #[arg(long)]
        heatmaps: bool,
    },
}

impl Overrides {
    fn apply(self, c: &mut RunConfig) -> Result<(), CliError> {
        if let Some(s) = self.system {
            c.system = match s.as_str() {
                "pendulum" => SystemSpec::Pendulum,
                "cartpole" => SystemSpec::Cartpole,
                "acrobot" => SystemSpec::Acrobot,
                "custom" if matches!(c.system, SystemSpec::Custom(_)) => c.system.clone(),
                other => return Err(CliError::Config(format!("field `system`: unknown system `{other}`"))),
            };
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v; })*
            };
        }
        set!(
            actuators => actuators, h => h, nu => nu, epochs => epochs, batch => batch, lr => lr,
            lambda_d => lambda_d, sigma => sigma, seed => seed, kp => gains.kp, kd => gains.kd,
            num_sequences => data.num_sequences, frames => data.frames,
            data_dir => paths.data_dir, params => paths.params_file, out_dir => paths.out_dir,
        );
        Ok(())
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LAGKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("LAGKIT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<String, CliError> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()),
        Command::Predict { sequence, horizon, render } => commands::predict(&cfg, sequence, horizon, render),
        Command::Control {
            target_state,
            target_frame,
            steps,
            start_state,
        } => {
            let k = cfg.benchmark()?.k();
            let target = match (target_state, target_frame) {
                (Some(s), _) => Target::State(commands::parse_state(&s, k, "target state")?),
                (None, Some(p)) => Target::Frame(p),
                (None, None) => unreachable!("clap requires a target"),
            };
            let start = start_state.map(|s| commands::parse_state(&s, k, "start state")).transpose()?;
            commands::control(&cfg, target, steps, start)
        }
        Command::Eval => commands::evaluate(&cfg),
        Command::Export { sequence, heatmaps } => commands::export(&cfg, sequence, heatmaps),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
