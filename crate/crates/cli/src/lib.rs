//! Config-driven runs, analyses and reports on top of `stochcon-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Common;
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "stochcon", version, about = "Stochastic contrastive pretraining and analyses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a model, or resume one with --checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Stop after this many completed epochs, leaving a resumable checkpoint.
        #[arg(long, hide = true)]
        stop_after_epoch: Option<u64>,
    },
    /// Frozen linear probe of the pretrained and of a random-init network.
    Probe(Common),
    /// Finetune the whole network with a linear classifier.
    Finetune(Common),
    /// Active Bernoulli bits per image.
    AnalyzeBits(Common),
    /// Aggregate learned Gaussian variance.
    AnalyzeVariance(Common),
    /// Macro F1 against the number of top-ranked representation units.
    AnalyzeUnits(Common),
    /// Supervised baseline with a dropped-out Bernoulli layer.
    SupervisedBernoulli(Common),
    /// Join a run directory's CSVs into one table.
    Report {
        /// Run directory (same as --out).
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Join rows even when their config hashes differ.
        #[arg(long)]
        force: bool,
    },
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, stop_after_epoch } => commands::pretrain(&common, stop_after_epoch),
        Command::Probe(c) => commands::probe(&c),
        Command::Finetune(c) => commands::finetune_cmd(&c),
        Command::AnalyzeBits(c) => commands::analyze_bits(&c),
        Command::AnalyzeVariance(c) => commands::analyze_variance(&c),
        Command::AnalyzeUnits(c) => commands::analyze_units(&c),
        Command::SupervisedBernoulli(c) => commands::supervised_bernoulli(&c),
        Command::Report { dir, out, force } => {
            let dir = dir.or(out).ok_or_else(|| CliError::Usage("report needs a run directory".into()))?;
            print!("{}", report::report(&dir, force)?);
            Ok(())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("stochcon: {e}");
            e.exit_code()
        }
    }
}
