//! `battformer` command-line tool.

mod commands;
mod error;
mod predict;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "battformer", version, about = "Battery SOC and temperature forecasting with transformer and LSTM models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the config-driven commands.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Worker thread cap; overrides `jobs`.
    #[arg(short, long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic trip CSVs and a manifest of the seeds used.
    Datagen(RunArgs),
    /// Prepare data, train one model and evaluate it on every split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Use a previously saved dataset cache instead of the data section.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write the prepared dataset to `dataset.bin`.
        #[arg(long)]
        save_dataset: bool,
    },
    /// Train and evaluate every (kind, W, H) cell of the grid.
    Grid(RunArgs),
    /// Forecast H steps of the targets for one trip from a trained run.
    Predict(predict::PredictArgs),
    /// Check every backward rule against central finite differences.
    Gradcheck {
        /// Deliberately break one primitive's backward rule.
        #[arg(long, hide = true, value_name = "OP")]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Datagen(a) => commands::datagen(&a),
        Command::Train {
            run,
            dataset,
            save_dataset,
        } => commands::train(&run, dataset.as_deref(), save_dataset),
        Command::Grid(a) => commands::grid(&a),
        Command::Predict(a) => predict::predict(&a),
        Command::Gradcheck { corrupt } => commands::gradcheck(corrupt.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
