//! Command-line front end for dataset generation, training and evaluation.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;

use anode_core::control_node::ControlScenario;
use anode_core::robot::TrajectoryKind;
use anode_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use commands::{EvalModels, EvalScenario, LoopMode, RolloutRequest, Run};
use config::RunConfig;
use std::path::PathBuf;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "anode",
    version,
    about = "Shape-NODE and Control-NODE experiments for continuum robots"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a shape dataset from the simulated robot.
    Generate,
    /// Train the Shape-NODE on a dataset.
    TrainShape {
        /// Dataset CSV [default: OUT/dataset.csv].
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the Control-NODE against a trained Shape-NODE.
    TrainControl {
        /// [default: OUT/shape_model.json]
        #[arg(long)]
        shape_model: Option<PathBuf>,
        #[arg(long, default_value = "tracking")]
        scenario: ControlScenario,
        /// Continue from a saved checkpoint (OUT/control_SCENARIO_checkpoint.json).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run an evaluation scenario and write metrics, logs and plots.
    Evaluate {
        #[arg(long, value_enum)]
        scenario: EvalScenario,
        #[command(flatten)]
        models: ModelPaths,
    },
    /// Track one trajectory once and write its log.
    Rollout {
        #[arg(long)]
        trajectory: TrajectoryKind,
        /// Jacobian control on the Shape-NODE without feedback.
        #[arg(long, conflicts_with = "closed_loop")]
        open_loop: bool,
        /// Receding-horizon Control-NODE with feedback (default).
        #[arg(long)]
        closed_loop: bool,
        /// Payload at the tip, grams.
        #[arg(long, default_value_t = 0.0)]
        payload: f64,
        /// Obstacle centre `x,y,z` in metres; adds a clearance column.
        #[arg(long, value_parser = parse_point)]
        obstacle: Option<[f64; 3]>,
        #[command(flatten)]
        models: ModelPaths,
    },
}

#[derive(Debug, Args)]
pub struct ModelPaths {
    /// [default: OUT/shape_model.json]
    #[arg(long)]
    pub shape_model: Option<PathBuf>,
    /// [default: OUT/control_tracking.json]
    #[arg(long)]
    pub control_model: Option<PathBuf>,
    /// [default: OUT/control_obstacle.json]
    #[arg(long)]
    pub obstacle_model: Option<PathBuf>,
}

fn parse_point(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        &[x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([x, y, z]),
        _ => Err("expected three finite coordinates x,y,z".into()),
    }
}

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        Error::Numeric(_) | Error::Training { .. } => EXIT_NUMERIC,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let run = Run::new(cfg, cli.common.out)?;
    let or_default = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| run.path(name));
    match cli.command {
        Command::Generate => {
            commands::generate(&run)?;
        }
        Command::TrainShape { dataset, resume } => {
            let dataset = or_default(dataset, commands::DATASET);
            commands::train_shape(&run, &dataset, resume.as_deref())?;
        }
        Command::TrainControl {
            shape_model,
            scenario,
            resume,
        } => {
            let shape = or_default(shape_model, commands::SHAPE_MODEL);
            commands::train_control(&run, &shape, scenario, resume.as_deref())?;
        }
        Command::Evaluate { scenario, models } => {
            let shape = or_default(models.shape_model, commands::SHAPE_MODEL);
            let control = or_default(
                models.control_model,
                &commands::control_model_name(ControlScenario::Tracking),
            );
            let obstacle = or_default(
                models.obstacle_model,
                &commands::control_model_name(ControlScenario::Obstacle),
            );
            let paths = EvalModels {
                shape: &shape,
                control: &control,
                obstacle_control: &obstacle,
            };
            commands::evaluate(&run, scenario, &paths)?;
        }
        Command::Rollout {
            trajectory,
            open_loop,
            closed_loop: _,
            payload,
            obstacle,
            models,
        } => {
            let shape = or_default(models.shape_model, commands::SHAPE_MODEL);
            let control = or_default(
                models.control_model,
                &commands::control_model_name(ControlScenario::Tracking),
            );
            let req = RolloutRequest {
                trajectory,
                mode: if open_loop {
                    LoopMode::Open
                } else {
                    LoopMode::Closed
                },
                payload,
                obstacle,
                shape: &shape,
                control: &control,
            };
            commands::rollout(&run, &req)?;
        }
    }
    Ok(())
}
