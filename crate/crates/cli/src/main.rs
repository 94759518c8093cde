use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod eval;
mod failure;
mod gen;
mod manifest;
mod train;

use failure::Failure;

/// Flow posteriors for the toy detector: data generation, training and calibration reports.
#[derive(Debug, Parser)]
#[command(name = "flowpost", version)]
struct Cli {
    /// Worker threads (0 uses every core). Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one of the reference datasets.
    Gen(gen::GenArgs),
    /// Train a posterior (and optionally a generative model) on a dataset file.
    Train(Box<train::TrainArgs>),
    /// Evaluate a trained model.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(subcommand)]
    kind: eval::EvalKind,
}

fn run(cli: Cli) -> Result<(), Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {} threads: {e}", cli.threads)))?;
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Gen(a) => gen::run(&a, threads),
        Command::Train(a) => train::run(&a, threads),
        Command::Eval(a) => eval::run(&a.kind, threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("flowpost: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}

/// Creates the parent directory of an output file.
fn ensure_parent(path: &std::path::Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Failure::io(p, e)),
        _ => Ok(()),
    }
}

fn ensure_dir(path: &PathBuf) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}
