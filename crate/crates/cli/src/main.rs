//! Binary entry point: argument parsing, dispatch, exit-code mapping.
//!
//! Exit 0 on success, 1 on usage errors, 2 on data/config errors, 3 on
//! runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowsentry_cli::commands;
use flowsentry_cli::error::CliError;

#[derive(Parser)]
#[command(
    name = "flowsentry",
    version,
    about = "Flow-window DDoS detection: preprocess, train, search, benchmark, score."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a run config and its referenced files; runs nothing.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit the preprocessor on the training split and persist its state.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model: checkpoint, epoch logs, metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master training seed, overriding the config's.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the architecture/learning-rate grid from the config.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master training seed, overriding the config's.
        #[arg(long)]
        seed: Option<u64>,
        /// Cell-training workers. Timing columns are byte-stable only at 1.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Score the stored checkpoint on the config's evaluation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Output directory holding the checkpoint (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Attack-probability decision threshold.
        #[arg(long, default_value_t = commands::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Measure training and inference throughput.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a flow CSV with the stored model, one verdict per row.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Flow CSV with the columns the dataset spec declares.
        input: PathBuf,
        /// Output directory holding the model (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Attack-probability decision threshold.
        #[arg(long, default_value_t = commands::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Render stored metrics and grid results as a markdown report.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Output directory holding the results (defaults to the config's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config } => commands::validate(&config),
        Command::Preprocess { config, out } => commands::preprocess(&config, out.as_deref()),
        Command::Train { config, out, seed } => commands::train(&config, out.as_deref(), seed),
        Command::Grid { config, out, seed, threads } => {
            commands::grid(&config, out.as_deref(), seed, threads)
        }
        Command::Eval { config, out, threshold } => {
            commands::eval(&config, out.as_deref(), threshold)
        }
        Command::Bench { config, out } => commands::bench(&config, out.as_deref()),
        Command::Predict { config, input, out, threshold } => {
            commands::predict(&config, &input, out.as_deref(), threshold)
        }
        Command::Report { config, out } => commands::report(&config, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // usage errors (unknown subcommand, bad flags) exit 1.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
