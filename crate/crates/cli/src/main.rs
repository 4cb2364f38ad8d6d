use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fnpeg_core::estimators::EstimatorKind;

mod commands;
mod config;

use commands::{CampaignArgs, CurriculumArgs, ErrorMapArgs, GenDataArgs, TrainArgs};
use config::{ConfigError, RunConfig, Scale, SeedBlock};

/// Entry guidance laboratory: data generation, LSTM training, curriculum
/// learning and Monte Carlo campaigns.
#[derive(Parser)]
#[command(name = "fnpeg-lab", version)]
struct Cli {
    /// TOML run configuration, or "default" for the built-in tables.
    #[arg(long, global = true, default_value = "default")]
    config: String,

    /// Master seed replacing every stream in the seed block.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Size profile for training and campaigns.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly closed-loop trajectories and store features and density targets.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        #[arg(long, default_value = "exponential")]
        estimator: EstimatorKind,
        /// Network used when the estimator is lstm.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the LSTM density estimator on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Warm-start from this model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Corrupt the features with measurement noise before training.
        #[arg(long)]
        noise: bool,
    },
    /// Alternate training, Monte Carlo evaluation and data regeneration.
    Curriculum {
        #[arg(long)]
        out: PathBuf,
        /// Initial dataset; generated with the exponential estimator if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Monte Carlo comparison of density estimators.
    Campaign {
        #[arg(long)]
        out: PathBuf,
        /// Repeatable; defaults to the configured list.
        #[arg(long = "estimator")]
        estimators: Vec<EstimatorKind>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        noise: bool,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Density prediction error by sequence length and altitude.
    ErrorMap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Test dataset; a held-out set is generated if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        noise: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(&cli.config, cli.scale)?;
    if let Some(seed) = cli.seed {
        config.seeds = SeedBlock::from_master(seed);
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(ConfigError("--jobs must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    match cli.command {
        Command::GenData {
            out,
            count,
            first_index,
            estimator,
            model,
        } => commands::gen_data(
            &config,
            &GenDataArgs {
                out,
                count,
                first_index,
                estimator,
                model,
            },
        ),
        Command::Train {
            data,
            out,
            init,
            noise,
        } => commands::train(
            &config,
            &TrainArgs {
                data,
                out,
                init,
                noise,
            },
        ),
        Command::Curriculum {
            out,
            data,
            iterations,
        } => commands::curriculum(
            &config,
            &CurriculumArgs {
                out,
                data,
                iterations,
            },
        ),
        Command::Campaign {
            out,
            estimators,
            model,
            noise,
            count,
        } => commands::campaign(
            &config,
            &CampaignArgs {
                out,
                estimators,
                model,
                noise,
                count,
            },
        ),
        Command::ErrorMap {
            model,
            out,
            data,
            noise,
        } => commands::error_map(
            &config,
            &ErrorMapArgs {
                model,
                out,
                data,
                noise,
            },
        ),
        Command::ShowConfig => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<fnpeg_core::Error>() {
        Some(fnpeg_core::Error::Config(_)) => 2,
        Some(fnpeg_core::Error::CurriculumDivergence { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
