//! `dvn`: plan unit orders, generate synthetic tasks, train, evaluate,
//! budget, and run budgeted inference.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dvn", version, about = "virtual-network training and budgeted inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print unit orders, the entry-level matrix, mask sizes, and the
    /// inclusion-count table; verify the configuration.
    Plan(commands::plan::PlanArgs),
    /// Generate synthetic datasets.
    #[command(subcommand)]
    Gen(commands::gen::GenCommand),
    /// Train per the configured scenario and write artifacts.
    Train(commands::train::TrainArgs),
    /// Evaluate trained parameters on the scenario's test splits.
    Eval(commands::eval::EvalArgs),
    /// Budgeted inference: pick the largest level under a parameter budget
    /// and predict.
    Infer(commands::infer::InferArgs),
    /// Print the parameter/latency accounting table.
    Budget(commands::budget::BudgetArgs),
}

/// Failures that indicate a bad configuration rather than a runtime fault.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn classify(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if let Some(core) = err.downcast_ref::<dvn_core::Error>() {
        return match core {
            dvn_core::Error::InvalidConfig(_)
            | dvn_core::Error::InvalidPartition(_)
            | dvn_core::Error::InvalidBackbone(_)
            | dvn_core::Error::UnknownTask(_)
            | dvn_core::Error::LevelOutOfRange { .. } => 2,
            _ => 1,
        };
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(args) => commands::plan::run(args),
        Command::Gen(cmd) => commands::gen::run(cmd),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Infer(args) => commands::infer::run(args),
        Command::Budget(args) => commands::budget::run(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(classify(&err))
        }
    }
}
