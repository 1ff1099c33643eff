//! `dvn eval`: accuracy of trained parameters on the scenario's test splits,
//! for every (task, level) or one selected pair.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Args;

use dvn_core::backbone::load_params;
use dvn_core::trainer::evaluate;

use crate::config::RunConfig;

#[derive(Args)]
pub struct EvalArgs {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Trained parameter stem (expects `<stem>.json` / `<stem>.bin`).
    #[arg(short, long)]
    pub params: PathBuf,
    /// Restrict to one task.
    #[arg(long)]
    pub task: Option<usize>,
    /// Restrict to one level (requires --task).
    #[arg(long, requires = "task")]
    pub level: Option<usize>,
}

pub fn run(args: EvalArgs) -> Result<ExitCode> {
    let config = RunConfig::load(&args.config)?;
    let config_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let bundle = config.load_bundle(&config_dir)?;
    let (spec, partition, configs) = config.assemble(&bundle)?;
    let params = load_params(&spec, &args.params)?;

    println!("{:>4} {:>5} {:>9}", "task", "level", "accuracy");
    for c in &configs {
        if let Some(t) = args.task {
            if c.task.0 != t {
                continue;
            }
        }
        for level in 1..=c.level_count() {
            if let Some(l) = args.level {
                if level != l {
                    continue;
                }
            }
            let acc = evaluate(
                &params, &spec, &partition, &configs, &bundle, c.task, level,
            )?;
            println!("{:>4} {:>5} {:>9.4}", c.task.0, level, acc);
        }
    }
    Ok(ExitCode::SUCCESS)
}
