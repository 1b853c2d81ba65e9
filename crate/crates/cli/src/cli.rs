//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{
    cmd_ablate, cmd_detect, cmd_evaluate, cmd_oracle_check, cmd_synth, cmd_train, Overrides, Reporter,
};
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "mdps", version, about = "Anomaly detection with masked diffusion posterior sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Never download backbone weights.
    #[arg(long)]
    pub offline: bool,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            seed: self.seed,
            offline: self.offline,
            output: self.output.clone(),
        };
        Ok(overrides.apply(RunConfig::load(&self.config)?))
    }

    fn reporter(&self) -> Reporter {
        Reporter { quiet: self.quiet }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on the normal training images of one category.
    Train(#[command(flatten)] Common),
    /// Score the test split with a trained checkpoint.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Accept a checkpoint whose category, schedule or model differs from the config.
        #[arg(long)]
        force: bool,
        /// Record per-step sampler diagnostics in trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Tabulate metrics from detection run directories.
    Evaluate {
        /// A detect run directory or a directory containing several.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        offline: bool,
        /// Where the evaluate run directory goes; defaults to the results directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run the configured ablation plan.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Check the sampler against the closed-form Gaussian posterior.
    OracleCheck(#[command(flatten)] Common),
    /// Write the configured synthetic benchmark to disk.
    Synth(#[command(flatten)] Common),
}

fn line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

/// Runs a parsed command and returns its one-line JSON summary.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(c) => line(&cmd_train(&c.resolve()?, c.reporter())?),
        Command::Detect {
            common,
            checkpoint,
            force,
            trace,
        } => line(&cmd_detect(&common.resolve()?, &checkpoint, force, trace, common.reporter())?),
        Command::Evaluate {
            results,
            config,
            output,
            quiet,
            ..
        } => {
            let output = match (output, config) {
                (Some(o), _) => Some(o),
                (None, Some(c)) => Some(RunConfig::load(&c)?.output_dir),
                (None, None) => None,
            };
            line(&cmd_evaluate(&results, output.as_deref(), Reporter { quiet })?)
        }
        Command::Ablate {
            common,
            checkpoint,
            force,
        } => line(&cmd_ablate(&common.resolve()?, &checkpoint, force, common.reporter())?),
        Command::OracleCheck(c) => {
            let outcome = cmd_oracle_check(&c.resolve()?, c.reporter())?;
            line(&serde_json::json!({
                "command": outcome.command,
                "run_dir": outcome.run_dir,
                "summary": outcome.summary,
                "distance_non_increasing": outcome.distance_non_increasing,
            }))
        }
        Command::Synth(c) => line(&cmd_synth(&c.resolve()?)?),
    }
}
