use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tskd_core::cli;
use tskd_core::config::ExperimentConfig;
use tskd_core::trainer::Variant;
use tskd_core::Result;

#[derive(Parser)]
#[command(
    name = "tskd",
    version,
    about = "Temporal-supervised knowledge distillation experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the teacher with cross-entropy.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a student under a distillation variant.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// vanilla, kd, at, tskd or tskd_fm
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the run's saved state, if any.
        #[arg(long)]
        resume: bool,
    },
    /// Fit ARIMA to a probe activation trajectory and forecast it.
    ProbeArima {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Run directory used as the delta baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeacher { config } => {
            cli::train_teacher(&ExperimentConfig::load(&config)?).map(drop)
        }
        Command::Distill {
            config,
            variant,
            seed,
            resume,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(v) = variant {
                cfg.variant = v.parse::<Variant>()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cli::distill(&cfg, resume).map(drop)
        }
        Command::ProbeArima { config } => {
            cli::probe_arima(&ExperimentConfig::load(&config)?).map(drop)
        }
        Command::Report {
            dirs,
            baseline,
            csv,
        } => cli::report(&dirs, baseline.as_deref(), csv.as_deref()).map(drop),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = run(args.command);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(cli::exit_code(&result) as u8)
}
