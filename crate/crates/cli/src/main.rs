//! `nestdiff` — train, run, and evaluate the latent-guided diffusion
//! classifier from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
//! 4 I/O or data error.

mod commands;
mod config_io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nestdiff_core::Error;

const CONFIG_KEYS: &str = "Config file keys (JSON; unknown keys are errors; --set overrides by dotted path):
  preset                    toy | paper
  seed                      master seed for data, training, and sampling
  m_samples                 diffusion samples per level (default 10 toy / 20 paper)
  iota                      Brier temperature for the calibrated probability
  k_override                tapped level count K (must satisfy K < L)
  t_override                diffusion chain length T
  dataset.source            synthetic | dir
  dataset.n                 synthetic sample count
  dataset.class_sep         synthetic class separation
  dataset.dir               class-per-subdirectory image root (source = dir)
  dataset.fractions         [train, val, test] split fractions
  train.epochs_backbone     stage 1 epochs
  train.epochs_shallow      stage 2 epochs
  train.epochs_diffusion    stage 3 epochs
  train.batch_size          minibatch size
  train.lr                  learning rate
  train.optimizer           adam | sgd
  train.seed                training seed
  train.patience            early-stopping patience (epochs)
  perturb                   perturbation specs, e.g. [\"gaussian:0.5\"]
  output_dir                run artifact directory
  threads                   inference worker threads (NESTDIFF_THREADS wins)";

#[derive(Parser)]
#[command(name = "nestdiff", version, about = "Robust classification via latent-guided corrective diffusion and nested ensembles", after_long_help = CONFIG_KEYS, after_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three training stages and write a checkpoint plus manifest.
    Train {
        /// Experiment config (JSON). A train manifest is also accepted.
        #[arg(long)]
        config: PathBuf,
        /// Override a config key by dotted path, e.g. --set dataset.n=500.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict the test split and write a report bundle.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config; defaults to the manifest next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Perturbation applied before prediction, e.g. gaussian:0.5.
        #[arg(long)]
        perturb: Option<String>,
        /// Report directory; defaults under the run's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metric CSVs from existing report bundles.
    Eval {
        /// One or more report directories containing predictions.jsonl.
        #[arg(long, required = true, num_args = 1..)]
        report: Vec<PathBuf>,
        /// Combined summary CSV path; defaults to summary.csv in the first report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/evaluate across a parameter grid and summarize.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Swept parameter: "k" or "perturb".
        #[arg(long)]
        param: String,
        /// Comma-separated grid, e.g. 3,4,5 or gaussian:0.5,gaussian:1.0.
        #[arg(long)]
        values: String,
    },
    /// Per-block representation drift under a perturbation.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        perturb: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle and property suite.
    Verify,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::Numeric(_) | Error::Shape(_) => 3,
        Error::Io(_) | Error::Data(_) | Error::Checkpoint(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides } => commands::train(&config, &overrides),
        Command::Infer {
            checkpoint,
            config,
            overrides,
            perturb,
            out,
        } => commands::infer(&checkpoint, config.as_deref(), &overrides, perturb.as_deref(), out.as_deref()),
        Command::Eval { report, out } => commands::eval(&report, out.as_deref()),
        Command::Sweep {
            config,
            overrides,
            param,
            values,
        } => commands::sweep(&config, &overrides, &param, &values),
        Command::Probe {
            checkpoint,
            config,
            overrides,
            perturb,
            out,
        } => commands::probe(&checkpoint, config.as_deref(), &overrides, &perturb, out.as_deref()),
        Command::Verify => commands::verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
