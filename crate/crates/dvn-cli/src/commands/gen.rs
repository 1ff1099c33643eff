//! `dvn gen`: synthetic dataset generation. Each generator writes
//! `<out>.<split>.json` + `.bin` pairs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Subcommand};

use dvn_core::data;

use crate::ConfigError;

#[derive(Subcommand)]
pub enum GenCommand {
    /// Gaussian clusters on a deterministic lattice; writes train/test.
    Blobs(BlobsArgs),
    /// Split one dataset's classes evenly into several tasks.
    Split(SplitArgs),
    /// Derive a coarse-labeled task from a fine-labeled one.
    Coarse(CoarseArgs),
}

#[derive(Args)]
pub struct BlobsArgs {
    #[arg(long)]
    pub classes: usize,
    /// Per-class sample count, split 70/30 into train/test.
    #[arg(long, conflicts_with_all = ["train_per_class", "test_per_class"])]
    pub per_class: Option<usize>,
    /// Explicit per-class train count (pairs with --test-per-class).
    #[arg(long, requires = "test_per_class")]
    pub train_per_class: Option<usize>,
    #[arg(long, requires = "train_per_class")]
    pub test_per_class: Option<usize>,
    /// Feature shape, comma separated (e.g. `2` or `1,14,14`).
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub task_id: usize,
    /// Output stem; writes `<out>.train.{json,bin}` and `<out>.test.{json,bin}`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SplitArgs {
    /// Source dataset manifest.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub parts: usize,
    /// Output stem; writes `<out>.task<t>.{json,bin}`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CoarseArgs {
    /// Source dataset manifest (fine labels).
    #[arg(long)]
    pub input: PathBuf,
    /// Coarse label per fine class, comma separated (e.g. `0,0,1,1`).
    #[arg(long, value_delimiter = ',')]
    pub groups: Vec<usize>,
    /// Output stem; writes `<out>.coarse.*` and `<out>.fine.*`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cmd: GenCommand) -> Result<ExitCode> {
    match cmd {
        GenCommand::Blobs(args) => {
            let (train, test) = match (args.per_class, args.train_per_class, args.test_per_class) {
                (_, Some(tr), Some(te)) => data::gen_blobs_counts(
                    args.classes,
                    tr,
                    te,
                    &args.shape,
                    args.spread,
                    args.seed,
                    args.task_id,
                )?,
                (Some(pc), _, _) => data::gen_blobs(
                    args.classes,
                    pc,
                    &args.shape,
                    args.spread,
                    args.seed,
                    args.task_id,
                )?,
                _ => {
                    return Err(anyhow!(ConfigError(
                        "provide --per-class or --train-per-class/--test-per-class".into()
                    )))
                }
            };
            let train_stem = with_suffix(&args.out, "train");
            let test_stem = with_suffix(&args.out, "test");
            data::save(&train, &train_stem).context("writing train split")?;
            data::save(&test, &test_stem).context("writing test split")?;
            println!(
                "wrote {} train / {} test samples to {}.{{train,test}}.{{json,bin}}",
                train.samples,
                test.samples,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        GenCommand::Split(args) => {
            let base = data::load(&args.input)?;
            let parts = data::split_classes(&base, args.parts)?;
            for ds in &parts {
                let stem = with_suffix(&args.out, &format!("task{}", ds.task_id));
                data::save(ds, &stem)?;
                println!(
                    "task {}: {} classes, {} samples -> {}.{{json,bin}}",
                    ds.task_id,
                    ds.class_count,
                    ds.samples,
                    stem.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        GenCommand::Coarse(args) => {
            let base = data::load(&args.input)?;
            let (coarse, fine) = data::coarse_fine(&base, &args.groups)?;
            let coarse_stem = with_suffix(&args.out, "coarse");
            let fine_stem = with_suffix(&args.out, "fine");
            data::save(&coarse, &coarse_stem)?;
            data::save(&fine, &fine_stem)?;
            println!(
                "coarse: {} classes, fine: {} classes, {} samples each",
                coarse.class_count, fine.class_count, coarse.samples
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn with_suffix(stem: &PathBuf, suffix: &str) -> PathBuf {
    let name = stem
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset");
    stem.with_file_name(format!("{}.{}", name, suffix))
}
