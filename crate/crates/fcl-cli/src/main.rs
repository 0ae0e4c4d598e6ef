//! `fcl` — command-line front end for the corner-digit robustness
//! experiments: dataset synthesis, seed-sweep training, noise-set
//! evaluation, and attribution-map probing.
//!
//! Any scalar in the JSON experiment config can be overridden with a dotted
//! flag using the JSON (kebab-case) spelling, e.g. `--train.tau=0.1` or
//! `--synth.train-per-base=1000`.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fcl",
    version,
    about = "Feature-contrastive training experiments on the corner-digit task",
    after_help = "Dotted overrides: any config field can be set with \
                  --<section>.<field>=<value> (kebab-case), e.g. --train.tau=0.1"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the 15-class corner-digit splits and write them as IDX files
    Synth(CommonArgs),
    /// Train one model per seed and summarize the sweep
    Train(CommonArgs),
    /// Score a checkpoint on the clean and noised test sets
    Eval(EvalArgs),
    /// Export utility / sensitivity maps for examples or class groups
    Probe(ProbeArgs),
    /// Write noised copies of the test split as IDX files
    Noise(NoiseArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model checkpoint to score
    #[arg(long)]
    checkpoint: PathBuf,
    /// Seed for the on-the-fly noise test sets
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model checkpoint to probe
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test-set example index to export maps for (repeatable)
    #[arg(long = "example")]
    examples: Vec<usize>,
    /// Export class-averaged maps for label groups 0-9 (label mod 10)
    #[arg(long)]
    groups: bool,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fraction of pixels to replace per image
    #[arg(long, default_value_t = 0.15)]
    frac: f64,
    /// Seed for the noise draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Pulls dotted-path overrides (`--a.b=v`) out of the raw argument list so
/// clap only sees its own flags.
fn split_overrides(raw: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut args = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in raw.into_iter().enumerate() {
        if i > 0 {
            if let Some(s) = a.to_str() {
                if let Some(rest) = s.strip_prefix("--") {
                    if let Some((key, value)) = rest.split_once('=') {
                        if key.contains('.') {
                            overrides.push((key.to_string(), value.to_string()));
                            continue;
                        }
                    }
                }
            }
        }
        args.push(a);
    }
    (args, overrides)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(c) => {
            let config = ExperimentConfig::load(c.config.as_deref(), overrides)?;
            commands::cmd_synth(&config)
        }
        Command::Train(c) => {
            let config = ExperimentConfig::load(c.config.as_deref(), overrides)?;
            commands::cmd_train(&config)
        }
        Command::Eval(a) => {
            let config = ExperimentConfig::load(a.common.config.as_deref(), overrides)?;
            commands::cmd_eval(&config, &a.checkpoint, a.seed)
        }
        Command::Probe(a) => {
            let config = ExperimentConfig::load(a.common.config.as_deref(), overrides)?;
            commands::cmd_probe(&config, &a.checkpoint, &a.examples, a.groups)
        }
        Command::Noise(a) => {
            let config = ExperimentConfig::load(a.common.config.as_deref(), overrides)?;
            commands::cmd_noise(&config, a.frac, a.seed)
        }
    }
}

fn main() {
    let (args, overrides) = split_overrides(std::env::args_os().collect());
    let cli = Cli::parse_from(args);
    if let Err(e) = run(cli, &overrides) {
        eprintln!("fcl: {e}");
        std::process::exit(e.exit_code());
    }
}
