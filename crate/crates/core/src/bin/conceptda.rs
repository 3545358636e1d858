use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conceptda::cli;

/// Concept-embedding domain adaptation experiments.
#[derive(Parser)]
#[command(name = "conceptda", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target datasets from a shift spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n_source: usize,
        #[arg(long)]
        n_target: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a run on one split, optionally sweeping concept interventions.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "target")]
        split: String,
        /// Comma-separated intervention ratios, e.g. 0,0.25,0.5,0.75,1
        #[arg(long, value_delimiter = ',')]
        intervene: Option<Vec<f64>>,
    },
    /// Run one numerical check of the theory.
    Verify {
        #[arg(long)]
        check: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write concept distribution plots and the bound audit for a run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let code = match Args::parse().command {
        Command::Gen { spec, n_source, n_target, seed, out } => cli::cmd_gen(&spec, n_source, n_target, seed, &out),
        Command::Train { config, data, out } => cli::cmd_train(&config, &data, &out),
        Command::Eval { run, split, intervene } => cli::cmd_eval(&run, &split, intervene.as_deref()),
        Command::Verify { check, seed } => cli::cmd_verify(&check, seed),
        Command::Report { run } => cli::cmd_report(&run),
    };
    ExitCode::from(code as u8)
}
