use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use liaf_cli::commands::{count, eval, gen, preprocess, train};
use liaf_cli::CliError;

#[derive(Parser)]
#[command(
    name = "liaf",
    version,
    about = "LIAF network training, evaluation, cost analysis and DVS preprocessing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert raw event streams into clip files plus a manifest
    Preprocess {
        /// event file or directory tree
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train a network from a JSON run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// overrides the config's shard count
        #[arg(long)]
        jobs: Option<usize>,
        /// overrides the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report accuracy and a confusion matrix for a checkpoint
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        /// confusion matrix CSV destination
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// rescale each clip to unit max, matching data.normalize at training
        #[arg(long)]
        normalize: bool,
    },
    /// Print the analytical weight/MUL/ADD table for a network
    Count {
        /// preset name; see the error message for the full list
        preset: Option<String>,
        /// network JSON ({"preset": ...} or {"spec": ...}) instead of a name
        #[arg(long)]
        config: Option<PathBuf>,
        /// also run instrumented counting and compare
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a toy dataset (moving-bar events, delayed-recall clips or
    /// delayed-recall token lines)
    Gen {
        /// moving-bar | delayed-recall | delayed-recall-text
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// total samples before the train/val split
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Preprocess {
            input,
            config,
            out,
            jobs,
        } => preprocess::run(&input, &config, &out, jobs),
        Cmd::Train {
            config,
            seed,
            jobs,
            out,
        } => train::run(&train::TrainArgs {
            config,
            seed,
            jobs,
            out,
        }),
        Cmd::Eval {
            checkpoint,
            data,
            out,
            jobs,
            normalize,
        } => eval::run(&checkpoint, &data, out.as_deref(), jobs, normalize),
        Cmd::Count {
            preset,
            config,
            verify,
            seed,
        } => count::run(preset.as_deref(), config.as_deref(), verify, seed),
        Cmd::Gen {
            task,
            out,
            seed,
            count,
        } => gen::run(&task, &out, seed, count),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
