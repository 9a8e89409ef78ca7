use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltsm_diff::commands::{self, Common};
use ltsm_diff::{AppError, Result};

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Run configuration (flat `section.key` JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; falls back to the config, then LTSMDIFF_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write outputs to exactly this directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Train,
    /// Forecast from the tail of a CSV series.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also write the denoising trajectory.
        #[arg(long)]
        trace: bool,
    },
    /// Test-split MSE/MAE, per horizon.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Few-shot fine-tuning on a target dataset.
    Transfer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Variant and depth ablations.
    Ablate,
}

/// Time-series forecasting with an adapted language-model encoder and a
/// diffusion head.
#[derive(Parser, Debug)]
#[command(name = "ltsm-diff", version, after_help = "Any config key can be overridden with --<section>.<key> <value>, e.g. --train.epochs 5")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Pulls `--section.key value` and `--section.key=value` out of the
/// arguments; clap sees the rest.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| AppError::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn run() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let c = cli.common;
    let common = Common { config: c.config, overrides, seed: c.seed, out: c.out, jobs: c.jobs };
    match cli.command {
        Command::Train => commands::cmd_train(&common),
        Command::Forecast { checkpoint, input, trace } => commands::cmd_forecast(&common, &checkpoint, &input, trace),
        Command::Evaluate { checkpoint } => commands::cmd_evaluate(&common, checkpoint.as_deref()),
        Command::Transfer { checkpoint } => commands::cmd_transfer(&common, checkpoint.as_deref()),
        Command::Ablate => commands::cmd_ablate(&common),
    }
    .map(|_| ())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
