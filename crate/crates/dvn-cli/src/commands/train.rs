//! `dvn train`: run the configured scenario and write artifacts under the
//! output directory: `params.{bin,json}`, `metrics.csv`, `budget.csv`, and
//! `summary.json`. Identical configs and seeds produce byte-identical
//! metrics and summary (the budget CSV's latency column is measured).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use dvn_core::backbone::save_params;
use dvn_core::budget::{attach_accuracies, budget_table, report_csv, LatencyConfig};
use dvn_core::trainer::{
    metrics_csv, train_joint, train_sequential, train_single, SequentialOptions,
};

use crate::config::{accuracy_map, Mode, RunConfig};

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured epoch count (per phase for sequential runs).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the latency measurement in the budget artifact.
    #[arg(long)]
    pub no_latency: bool,
}

pub fn run(args: TrainArgs) -> Result<ExitCode> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let config_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));

    let bundle = config.load_bundle(&config_dir)?;
    let (spec, partition, configs) = config.assemble(&bundle)?;

    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;

    let (params, metrics, final_acc, snapshot_acc) = match config.scenario.mode {
        Mode::Joint => {
            let out = train_joint(&bundle, &spec, &partition, &configs, &config.train)?;
            (out.params, out.metrics, out.final_accuracy, None)
        }
        Mode::Single => {
            let out = train_single(&bundle, &spec, &partition, &config.train)?;
            (out.params, out.metrics, out.final_accuracy, None)
        }
        Mode::Sequential => {
            let opts = SequentialOptions {
                distill: true,
                phase1_epochs: config.train.epochs,
                phase2_epochs: config.train.epochs,
            };
            let out =
                train_sequential(&bundle, &spec, &partition, &configs, &config.train, &opts)?;
            (
                out.params,
                out.metrics,
                out.final_accuracy,
                Some(out.snapshot_accuracy),
            )
        }
    };

    save_params(&params, &out_dir.join("params"))?;
    fs::write(out_dir.join("metrics.csv"), metrics_csv(&metrics))?;

    let latency_params = if args.no_latency { None } else { Some(&params) };
    let mut report = budget_table(
        &spec,
        &partition,
        &configs,
        latency_params,
        &LatencyConfig::default(),
    )?;
    let acc_triples: Vec<_> = final_acc.iter().map(|e| (e.task, e.level, e.accuracy)).collect();
    attach_accuracies(&mut report, &acc_triples);
    fs::write(out_dir.join("budget.csv"), report_csv(&report))?;

    let mut summary = json!({
        "mode": config.scenario.mode,
        "seed": config.train.seed,
        "epochs": config.train.epochs,
        "tasks": bundle.tasks.len(),
        "units": partition.unit_count(),
        "final_accuracy": accuracy_map(&final_acc),
    });
    if let Some(snapshot) = snapshot_acc {
        summary["snapshot_accuracy"] = json!(accuracy_map(&snapshot));
    }
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    println!("artifacts written to {}", out_dir.display());
    for e in &final_acc {
        println!(
            "task {} level {}: test accuracy {:.4}",
            e.task, e.level, e.accuracy
        );
    }
    Ok(ExitCode::SUCCESS)
}
