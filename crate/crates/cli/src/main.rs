//! `aeriscast`: train, roll out, and verify an autoregressive gridded
//! forecast model from a single JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use aeriscast_cli::{commands::Pipeline, config::load_config};
use aeriscast_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aeriscast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value by dotted path, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the toy dataset into the run directory.
    GenerateData(Common),
    /// Compute per-channel normalization statistics over the training split.
    ComputeStats(Common),
    /// Pre-train the single-step model (resumes from a checkpoint if present).
    Train(Common),
    /// Fine-tune with a multi-step unrolled loss.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Unroll length: 4 or 8.
        #[arg(long)]
        steps: usize,
    },
    /// Produce autoregressive forecasts from evenly spaced test-split inits.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Number of forecast initializations.
        #[arg(long)]
        inits: Option<usize>,
        /// Forecast horizon in days.
        #[arg(long)]
        lead_days: Option<usize>,
        /// Which trained model to use (pretrain, finetune4, finetune8).
        #[arg(long)]
        model: Option<String>,
    },
    /// Score forecasts: RMSE, ACC, spectra, and lagged-ensemble metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Which trained model to score (defaults to the best available).
        #[arg(long)]
        model: Option<String>,
    },
    /// Write the score table (CSV/JSON) and SVG figures.
    Report(Common),
    /// Run the 2x2x2 loss-weighting / unroll-length ablation grid.
    Ablate(Common),
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Unroll length for the checked loss.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 8)]
        coords: usize,
        /// Fail (exit 3) if the max relative error exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateData(c)
            | Command::ComputeStats(c)
            | Command::Train(c)
            | Command::Report(c)
            | Command::Ablate(c) => c,
            Command::Finetune { common, .. }
            | Command::Rollout { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let common = cli.command.common();
    let loaded = load_config(&common.config, &common.sets)?;
    let pipe = Pipeline::new(&loaded)?;
    println!("run {} -> {}", pipe.hash, pipe.run_dir.display());
    match cli.command {
        Command::GenerateData(_) => pipe.generate_data(),
        Command::ComputeStats(_) => pipe.compute_stats(),
        Command::Train(_) => pipe.train(),
        Command::Finetune { steps, .. } => pipe.finetune(steps),
        Command::Rollout {
            inits, lead_days, model, ..
        } => pipe.rollout_cmd(
            model.as_deref(),
            inits.unwrap_or(pipe.cfg.evaluation.n_inits),
            lead_days.unwrap_or(pipe.cfg.evaluation.lead_days),
        ),
        Command::Evaluate { model, .. } => pipe.evaluate(model.as_deref()),
        Command::Report(_) => pipe.report(),
        Command::Ablate(_) => pipe.ablate(),
        Command::Gradcheck {
            steps,
            coords,
            tolerance,
            ..
        } => pipe.gradcheck(steps, coords, tolerance).map(|_| ()),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_)
        | Error::OutOfRange { .. }
        | Error::Malformed { .. }
        | Error::VersionMismatch { .. }
        | Error::DegenerateChannel { .. }
        | Error::Alignment(_)
        | Error::MissingInits { .. } => 2,
        Error::NumericFailure { .. } => 3,
        Error::Io { .. } | Error::NotFound { .. } | Error::ChecksumMismatch { .. } => 4,
    }
}

fn main() -> ExitCode {
    aeriscast_cli::init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
