//! `attnseg` command line.
//!
//! Exit codes: 0 success, 1 check or run failure, 2 usage or configuration
//! error, 3 I/O error. Every command first prints its resolved configuration
//! as one line of JSON; saved to a file and passed back with `--config`, it
//! reproduces the run.

mod check;
mod eval;
mod gen;
mod settings;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "attnseg",
    version,
    about = "Attention blocks for debris segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(gen::GenArgs),
    /// Train one model variant on a dataset's training split.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint (or the ground truth itself) on a dataset split.
    Eval(eval::EvalArgs),
    /// Compare analytic and finite-difference gradients of single blocks.
    Gradcheck(check::GradcheckArgs),
    /// Time forward and forward+backward passes of single blocks.
    Bench(check::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => check::gradcheck(a),
        Command::Bench(a) => check::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
