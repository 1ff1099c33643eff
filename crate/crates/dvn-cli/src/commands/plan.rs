//! `dvn plan`: unit orders, the entry-level matrix, per-level mask sizes,
//! inclusion counts, and significance, plus configuration validation.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::Args;
use serde_json::json;

use dvn_core::budget::count_breakdown;
use dvn_core::partition::{entry_level, inclusion_counts, level_mask, validate, UnitId};

use crate::config::RunConfig;
use crate::ConfigError;

#[derive(Args)]
pub struct PlanArgs {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Emit the plan as JSON instead of tables.
    #[arg(long)]
    pub json: bool,
}

pub fn run(args: PlanArgs) -> Result<ExitCode> {
    let config = RunConfig::load(&args.config)?;
    let config_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let bundle = config.load_bundle(&config_dir)?;
    let (spec, partition, configs) = config.assemble(&bundle)?;

    let report = validate(&partition, &configs);
    let k = partition.unit_count();

    // per-(task, level) body parameter counts
    let mut mask_sizes = Vec::new();
    for c in &configs {
        let mut row = Vec::new();
        for l in 1..=c.level_count() {
            let mask = level_mask(&partition, c, l)?;
            row.push(count_breakdown(&spec, &mask)?.body());
        }
        mask_sizes.push(row);
    }
    let inclusion = inclusion_counts(&configs);

    if args.json {
        let doc = json!({
            "k": k,
            "orders": configs.iter().map(|c| {
                json!({
                    "task": c.task.0,
                    "order": c.order.iter().map(|u| u.0).collect::<Vec<_>>(),
                })
            }).collect::<Vec<_>>(),
            "entry_levels": configs.iter().map(|c| {
                (1..=k).map(|i| c.entry_level(UnitId(i)).unwrap_or(0)).collect::<Vec<_>>()
            }).collect::<Vec<_>>(),
            "mask_body_params": mask_sizes,
            "inclusion_counts": inclusion,
            "valid": report.passed(),
            "violations": report.violations,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!("units: {}", k);
        println!("\nunit orders (level 1 -> {}):", k);
        for c in &configs {
            let order: Vec<String> = c.order.iter().map(|u| u.to_string()).collect();
            println!("  task {}: ({})", c.task, order.join(", "));
        }

        println!("\nentry level of unit i for task j (rows: tasks, cols: units):");
        print!("      ");
        for i in 1..=k {
            print!(" u{:<3}", i);
        }
        println!();
        for c in &configs {
            print!("  t{:<3}", c.task);
            for i in 1..=k {
                print!(" {:<4}", entry_level(&configs, UnitId(i), c.task)?);
            }
            println!();
        }

        println!("\nbody parameters per (task, level):");
        for (c, row) in configs.iter().zip(&mask_sizes) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            println!("  task {}: [{}]", c.task, cells.join(", "));
        }

        println!("\nloss-term inclusion count per unit (of {} terms):", k * k);
        for (i, count) in inclusion.iter().enumerate() {
            println!("  unit {}: {}", i + 1, count);
        }

        println!("\nsignificance |levels - entry| per (task, unit):");
        for c in &configs {
            let n_h = c.level_count();
            let row: Vec<String> = (1..=k)
                .map(|i| {
                    let s = c.entry_level(UnitId(i)).unwrap_or(n_h);
                    format!("{}", n_h.saturating_sub(s))
                })
                .collect();
            println!("  task {}: [{}]", c.task, row.join(", "));
        }

        // total-scope counts give the budget entry points
        println!("\ntotal parameters at level 1 per task:");
        for c in &configs {
            let mask = level_mask(&partition, c, 1)?;
            println!(
                "  task {}: {}",
                c.task,
                count_breakdown(&spec, &mask)?.total()
            );
        }

        if report.passed() {
            println!("\nvalidation: pass");
        } else {
            println!("\nvalidation: FAIL");
            for v in &report.violations {
                println!("  violation: {}", v);
            }
        }
    }

    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(anyhow!(ConfigError(format!(
            "configuration invalid: {}",
            report.first_violation().unwrap_or("unknown violation")
        ))))
    }
}
