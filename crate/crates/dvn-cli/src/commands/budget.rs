//! `dvn budget`: the accounting table as pretty text or CSV; latency is
//! measured only when trained parameters are supplied.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Args;

use dvn_core::backbone::load_params;
use dvn_core::budget::{budget_table, report_csv, report_table, LatencyConfig};

use crate::config::RunConfig;

#[derive(Args)]
pub struct BudgetArgs {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Trained parameter stem; enables the latency column.
    #[arg(short, long)]
    pub params: Option<PathBuf>,
    /// Emit CSV instead of a table.
    #[arg(long)]
    pub csv: bool,
    /// Timed runs per row (after 100 warm-up runs).
    #[arg(long, default_value_t = 1000)]
    pub runs: usize,
}

pub fn run(args: BudgetArgs) -> Result<ExitCode> {
    let config = RunConfig::load(&args.config)?;
    let config_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let bundle = config.load_bundle(&config_dir)?;
    let (spec, partition, configs) = config.assemble(&bundle)?;
    let params = match &args.params {
        Some(stem) => Some(load_params(&spec, stem)?),
        None => None,
    };
    let latency = LatencyConfig {
        warmup: 100,
        runs: args.runs,
    };
    let report = budget_table(&spec, &partition, &configs, params.as_ref(), &latency)?;
    if args.csv {
        print!("{}", report_csv(&report));
    } else {
        print!("{}", report_table(&report));
    }
    Ok(ExitCode::SUCCESS)
}
