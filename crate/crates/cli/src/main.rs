use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::CliError;

/// Morphing-model driver: phantom data, supervisor pre-training, training,
/// frame synthesis, evaluation and the loss-weight sweep.
#[derive(Parser)]
#[command(name = "dmm", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Generate paired phantoms, ground-truth intermediates and held-out sources.
    PhantomGen,
    /// Pre-train the severity classifier used for supervision.
    PretrainSupervisor,
    /// Train the morphing model.
    Train,
    /// Write morphed frames for every source.
    Synthesize,
    /// Score synthesized frames against ground truth.
    Evaluate,
    /// Short training runs over a grid of loss weights.
    Sweep,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolve()?;
    match cli.verb {
        Verb::PhantomGen => commands::phantom_gen(&cfg),
        Verb::PretrainSupervisor => commands::pretrain(&cfg),
        Verb::Train => commands::train(&cfg),
        Verb::Synthesize => commands::synthesize(&cfg),
        Verb::Evaluate => commands::evaluate(&cfg),
        Verb::Sweep => commands::sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
