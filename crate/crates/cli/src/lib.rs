//! Command-line harness: generate synthetic albums, train, evaluate under the
//! two-direction protocol, run the method ablation, check gradients, and
//! merge results.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod files;
pub mod report;

#[derive(Debug, Parser)]
#[command(name = "albumseq", version, about = "Person recognition in photo albums as sequence prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic album world and its two splits.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per split (or a single split).
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// `0`, `1` or `both`.
        #[arg(long, default_value = "both")]
        split: String,
    },
    /// Evaluate trained models in both protocol directions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the checkpoints written by `train`.
        #[arg(long)]
        models: PathBuf,
        /// Orderings per query instance.
        #[arg(long, default_value_t = albumseq::inference::DEFAULT_BUDGET)]
        budget: usize,
        /// Region fusion when more than one region is given.
        #[arg(long, default_value = "avg")]
        fusion: String,
        /// Region model(s) to evaluate, repeatable.
        #[arg(long = "region")]
        regions: Vec<String>,
    },
    /// Appearance-only, Ours-relation and Ours under the two-direction protocol.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = albumseq::inference::DEFAULT_BUDGET)]
        budget: usize,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Merge metrics and training files into one table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Metrics or training summary files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => commands::gen(&common),
        Command::Train { common, data, split } => commands::train(&common, &data, &split),
        Command::Eval {
            common,
            data,
            models,
            budget,
            fusion,
            regions,
        } => commands::eval(&common, &data, &models, budget, &fusion, &regions),
        Command::Ablate { common, data, budget } => commands::ablate(&common, &data, budget),
        Command::Gradcheck { common } => commands::gradcheck(&common),
        Command::Report { common, inputs } => report::report(&common, &inputs),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}
