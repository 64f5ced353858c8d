//! `hamflow`: config-driven runner for simulation, sampling, training and
//! evaluation of Hamiltonian flow maps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error. Errors
//! are printed to stderr as a single JSON object.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "hamflow", version, about = "Learn and evaluate Hamiltonian flow maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Simulate,
    Sample,
    Train,
    Evaluate,
    Bench,
    VerifyAdjoint,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::Sample => "sample",
            Kind::Train => "train",
            Kind::Evaluate => "evaluate",
            Kind::Bench => "bench",
            Kind::VerifyAdjoint => "verify-adjoint",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the configured states with the configured scheme.
    Simulate(Common),
    /// Draw an HMC-H0 sample set.
    Sample(Common),
    /// Train a flow map and write the model, loss log and train record.
    Train(Common),
    /// Roll out a trained model and score it against a reference.
    Evaluate(Common),
    /// Time schemes and the model on a batch of states.
    Bench(Common),
    /// First-variation gaps and adjoint conditioning of a model.
    VerifyAdjoint(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// `dotted.key=value` overrides, applied in order.
    #[arg(long = "override", short = 'o', num_args = 1.., value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Model directory; overrides `model.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Validate the configuration and stop before doing any work.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(hamflow::Error),
}

impl From<hamflow::Error> for CliError {
    fn from(e: hamflow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config(m) => serde_json::json!({ "error": "config", "message": m }),
            CliError::Runtime(e) => serde_json::json!({
                "error": "runtime",
                "kind": format!("{e:?}").split(['(', ' ', '{']).next().unwrap_or(""),
                "message": e.to_string(),
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Command::Simulate(c) => (Kind::Simulate, c),
        Command::Sample(c) => (Kind::Sample, c),
        Command::Train(c) => (Kind::Train, c),
        Command::Evaluate(c) => (Kind::Evaluate, c),
        Command::Bench(c) => (Kind::Bench, c),
        Command::VerifyAdjoint(c) => (Kind::VerifyAdjoint, c),
    };
    match commands::run(kind, &common) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
