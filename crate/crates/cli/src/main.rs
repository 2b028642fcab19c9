//! `fairembed`: synthesize or ingest embeddings, train the attribute
//! classifier and the residual learner, debias, audit and evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "fairembed", version, about = "Protected-attribute debiasing and skew audits for embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set arl.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic set with planted attribute directions.
    Synth(Common),
    /// Train the protected-attribute classifier(s).
    TrainPac(Common),
    /// Train the residual learner against the frozen classifier(s).
    TrainArl(Common),
    /// Write the debiased set and residuals.
    Debias(Common),
    /// MaxSkew/MinSkew audit, with a before/after delta when a debiased set exists.
    Audit(Common),
    /// Linear probe between image and text difference vectors.
    Probe(Common),
    /// Zero-shot accuracy before and after debiasing.
    Zeroshot(Common),
}

impl Command {
    fn split(&self) -> (&'static str, &Common) {
        match self {
            Command::Synth(c) => ("synth", c),
            Command::TrainPac(c) => ("train-pac", c),
            Command::TrainArl(c) => ("train-arl", c),
            Command::Debias(c) => ("debias", c),
            Command::Audit(c) => ("audit", c),
            Command::Probe(c) => ("probe", c),
            Command::Zeroshot(c) => ("zeroshot", c),
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<fairembed_core::Error>())
        .any(fairembed_core::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, common) = cli.command.split();
    let cfg = match RunConfig::load(common.config.as_deref(), &common.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match commands::run(name, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
