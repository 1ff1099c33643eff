//! `dvn infer`: pick the largest hierarchy level whose parameter count fits
//! the budget, then predict labels for an input dataset.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Args;

use dvn_core::backbone::{eval_logits, load_params};
use dvn_core::budget::{budget_table, select_level, LatencyConfig};
use dvn_core::data;
use dvn_core::partition::{level_mask, TaskId};

use crate::config::RunConfig;

#[derive(Args)]
pub struct InferArgs {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Trained parameter stem.
    #[arg(short, long)]
    pub params: PathBuf,
    /// Task to run.
    #[arg(long)]
    pub task: usize,
    /// Maximum total parameter count for the chosen level.
    #[arg(long)]
    pub budget: usize,
    /// Input dataset manifest; labels, if present, are ignored.
    #[arg(long)]
    pub input: PathBuf,
}

pub fn run(args: InferArgs) -> Result<ExitCode> {
    let config = RunConfig::load(&args.config)?;
    let config_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let bundle = config.load_bundle(&config_dir)?;
    let (spec, partition, configs) = config.assemble(&bundle)?;
    let params = load_params(&spec, &args.params)?;

    let task = TaskId(args.task);
    let report = budget_table(&spec, &partition, &configs, None, &LatencyConfig::default())?;
    let level = select_level(&report, task, args.budget)?;
    let row = report.row(task, level).expect("selected row exists");

    let input = data::load(&args.input)?;
    let indices: Vec<usize> = (0..input.samples).collect();
    let (features, _) = input.gather(&indices)?;
    let c = configs
        .iter()
        .find(|c| c.task == task)
        .ok_or(dvn_core::Error::UnknownTask(task.0))?;
    let mask = level_mask(&partition, c, level)?;
    let logits = eval_logits(&params, &spec, &mask, &features)?;

    println!("task {} level {} ({} parameters)", task, level, row.total_params);
    let (b, classes) = (logits.shape()[0], logits.shape()[1]);
    for i in 0..b {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut best = 0;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        println!("{}", best);
    }
    Ok(ExitCode::SUCCESS)
}
