//! `ptd` — compression pipeline driver.
//!
//! Subcommands: train, prune, make-student, distill, eval, verify, report.
//! Exit codes: 0 ok, 1 config error, 2 data/file error, 3 numeric failure,
//! 4 failed verification.

mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ptd", version, about = "Prune-then-distill compression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    LrRewind,
    Synflow,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (strict JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list; runs once per seed into out/seed<N>/ and
    /// writes a mean/std summary.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Force single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Numeric precision of the run.
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense model from scratch.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Prune a trained checkpoint (iterative magnitude with fine-tuning, or
    /// data-free synflow).
    Prune {
        #[command(flatten)]
        common: CommonArgs,
        /// Input checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overall sparsity target; mapped to the smallest iteration count
        /// whose schedule reaches it.
        #[arg(long)]
        target_sparsity: Option<f64>,
        /// Pruning method (overrides the config).
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Derive a narrower dense student from a pruned checkpoint.
    MakeStudent {
        #[command(flatten)]
        common: CommonArgs,
        /// Input (pruned) checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Distill a teacher checkpoint into a freshly initialized student.
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Student architecture file (defaults to the config's arch).
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; with --teacher also reports agreement.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run the self-verification suite; exit 4 on any failed check.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Aggregate metrics.csv files from run directories into a summary.
    Report {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Run directories to aggregate.
        dirs: Vec<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let code = match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
