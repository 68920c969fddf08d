//! `mos`: experiment driver for the multi-task face detector core.

mod ablate;
mod checks;
mod config;
mod data;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mos", version, about = "Train and evaluate the multi-task face detector on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Print the anchor layout and check the anchor count.
    Anchors {
        /// Input side; defaults to model.input_size.
        #[arg(long)]
        input_size: Option<usize>,
        /// Write every anchor box as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        /// Random instances per suite.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Suites to run (all when omitted).
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Also fail when a coordinate misses the gate only by rounding.
        #[arg(long)]
        strict: bool,
        /// Write the per-suite results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the training and test scenes as dataset files.
    GenData {
        /// Output directory; defaults to `<output.dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, writing a manifest, metrics stream, checkpoints and a final report.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation ladder and print a comparison table.
    Ablate {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Output directory; defaults to `<output.dir>/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time training steps.
    Bench {
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<checks::GradcheckFailed>() {
            return EXIT_GRADCHECK;
        }
        if let Some(mos_core::Error::Diverged { .. }) = cause.downcast_ref::<mos_core::Error>() {
            return EXIT_DIVERGED;
        }
    }
    EXIT_VALIDATION
}

/// Configuration for `eval`: the given file, else the one stored with the
/// checkpoint, else defaults.
fn eval_config(common: &Common, checkpoint: &std::path::Path) -> Result<ExperimentConfig> {
    if common.config.is_some() {
        return ExperimentConfig::load(common.config.as_deref(), &common.overrides);
    }
    match run::load_checkpoint(checkpoint)?.1 {
        Some(manifest) => {
            let cfg = manifest.config.with_overrides(&common.overrides)?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => ExperimentConfig::load(None, &common.overrides),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let load = || ExperimentConfig::load(common.config.as_deref(), &common.overrides);
    match cli.command {
        Command::Anchors { input_size, out } => {
            let size = match input_size {
                Some(s) => s,
                None => load()?.model.input_size,
            };
            checks::run_anchors(size, out.as_deref())?;
        }
        Command::Gradcheck {
            seeds,
            suites,
            strict,
            out,
        } => {
            checks::run_gradcheck(&suites, seeds, strict, out.as_deref())?;
        }
        Command::GenData { out } => {
            let cfg = load()?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.join("data"));
            data::generate(&cfg, &dir)?;
        }
        Command::Train { resume } => {
            run::run_train(&load()?, resume.as_deref())?;
        }
        Command::Eval { checkpoint, out } => {
            let cfg = eval_config(common, &checkpoint)?;
            run::run_eval(&cfg, &checkpoint, out.as_deref())?;
        }
        Command::Ablate { seeds, out } => {
            let cfg = load()?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.join("ablation"));
            ablate::run_ablate(&cfg, seeds, &dir)?;
        }
        Command::Bench { steps, warmup } => {
            run::run_bench(&load()?, steps, warmup)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
