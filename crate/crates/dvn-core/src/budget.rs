//! Parameter accounting and budget-driven level selection.
//!
//! Body counts follow block arithmetic: a mask including channel sets
//! `(in_r, out_r)` in layer r holds `|in_r| * |out_r| * kernel^2` weight
//! entries (the included units' diagonal blocks plus every interconnection
//! block among them) and `|out_r|` biases. Total scope adds the task's input
//! layer, the (task, level) head, and normalization parameters.
//!
//! Density is reported in body scope by default: the classic per-level
//! ratios only hold for the shared body, which is what levels actually vary.
//! Latency is measured, never modeled.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{eval_logits, BackboneSpec, LayerKind, ModelParams, NormKey, NormSite};
use crate::error::{Error, Result};
use crate::partition::{level_mask, LevelMask, TaskId, UnitPartition, VirtualNetConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountScope {
    /// Masked body blocks only (weights + biases).
    Body,
    /// Body plus the task input layer, the (task, level) head, and
    /// normalization scale/shift.
    Total,
}

/// Entry counts of one mask, split by where they live.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountBreakdown {
    pub body_weights: usize,
    pub body_biases: usize,
    pub input: usize,
    pub head: usize,
    pub norm: usize,
}

impl CountBreakdown {
    pub fn body(&self) -> usize {
        self.body_weights + self.body_biases
    }

    pub fn total(&self) -> usize {
        self.body() + self.input + self.head + self.norm
    }
}

/// Per-component counts of the parameters a mask selects.
pub fn count_breakdown(spec: &BackboneSpec, mask: &LevelMask) -> Result<CountBreakdown> {
    if mask.layers.len() != spec.body.len() {
        return Err(Error::InvalidBackbone(format!(
            "mask covers {} layers, body has {}",
            mask.layers.len(),
            spec.body.len()
        )));
    }
    let mut out = CountBreakdown::default();
    for (layer, channels) in spec.body.iter().zip(&mask.layers) {
        let kernel_sq = match layer.kind {
            LayerKind::Dense => 1,
            LayerKind::Conv2d => {
                let k = layer.kernel.expect("validated");
                k * k
            }
        };
        out.body_weights += channels.inputs.len() * channels.outputs.len() * kernel_sq;
        out.body_biases += channels.outputs.len();
    }
    let ti = spec.task_index(mask.task)?;
    let input = &spec.input_layers[ti];
    let input_kernel_sq = match input.kind {
        LayerKind::Dense => 1,
        LayerKind::Conv2d => {
            let k = input.kernel.expect("validated");
            k * k
        }
    };
    out.input = input.in_channels * input.out_channels * input_kernel_sq + input.out_channels;
    let head = spec.head(mask.task, mask.level)?;
    out.head = head.in_features * head.classes + head.classes;
    for site in std::iter::once(NormSite::Input).chain((0..spec.body.len()).map(NormSite::Body)) {
        if let Some(width) = spec.norm_width(NormKey {
            task: mask.task,
            level: mask.level,
            site,
        }) {
            out.norm += 2 * width;
        }
    }
    Ok(out)
}

/// Parameter count of a mask at the given scope.
pub fn count_params(spec: &BackboneSpec, mask: &LevelMask, scope: CountScope) -> Result<usize> {
    let breakdown = count_breakdown(spec, mask)?;
    Ok(match scope {
        CountScope::Body => breakdown.body(),
        CountScope::Total => breakdown.total(),
    })
}

/// One (task, level) row of the accounting table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub task: TaskId,
    pub level: usize,
    pub body_params: usize,
    pub total_params: usize,
    /// Body-scope parameter fraction of the full body.
    pub density: f64,
    /// Inverse density.
    pub compression: f64,
    /// Mean eval-mode seconds per single-sample forward, when measured.
    pub latency_s: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub rows: Vec<BudgetRow>,
    /// Body-scope count of the full (top-level) body, the density
    /// denominator.
    pub full_body_params: usize,
}

impl BudgetReport {
    pub fn row(&self, task: TaskId, level: usize) -> Option<&BudgetRow> {
        self.rows.iter().find(|r| r.task == task && r.level == level)
    }

    pub fn task_rows(&self, task: TaskId) -> impl Iterator<Item = &BudgetRow> {
        self.rows.iter().filter(move |r| r.task == task)
    }
}

/// Latency measurement protocol: single-sample eval-mode forwards on a
/// quiesced thread, `warmup` unrecorded runs then the mean of `runs`.
#[derive(Clone, Copy, Debug)]
pub struct LatencyConfig {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            warmup: 100,
            runs: 1000,
        }
    }
}

fn probe_input(spec: &BackboneSpec, task: TaskId) -> Result<Tensor> {
    let ti = spec.task_index(task)?;
    let mut shape = vec![1];
    shape.extend_from_slice(&spec.tasks[ti].input_shape);
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(task.0 as u64);
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data)
}

fn measure_latency(
    params: &ModelParams,
    spec: &BackboneSpec,
    mask: &LevelMask,
    cfg: &LatencyConfig,
) -> Result<f64> {
    let input = probe_input(spec, mask.task)?;
    for _ in 0..cfg.warmup {
        eval_logits(params, spec, mask, &input)?;
    }
    let start = Instant::now();
    for _ in 0..cfg.runs {
        std::hint::black_box(eval_logits(params, spec, mask, &input)?);
    }
    Ok(start.elapsed().as_secs_f64() / cfg.runs.max(1) as f64)
}

/// Full accounting over all (task, level) pairs. The latency column is
/// filled only when parameters are supplied.
pub fn budget_table(
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    params: Option<&ModelParams>,
    latency: &LatencyConfig,
) -> Result<BudgetReport> {
    let full = full_body_count(spec, partition, configs)?;
    let mut rows = Vec::new();
    for config in configs {
        for level in 1..=config.level_count() {
            let mask = level_mask(partition, config, level)?;
            let breakdown = count_breakdown(spec, &mask)?;
            let body = breakdown.body();
            let density = body as f64 / full as f64;
            let latency_s = match params {
                Some(p) => Some(measure_latency(p, spec, &mask, latency)?),
                None => None,
            };
            rows.push(BudgetRow {
                task: config.task,
                level,
                body_params: body,
                total_params: breakdown.total(),
                density,
                compression: 1.0 / density,
                latency_s,
                accuracy: None,
            });
        }
    }
    Ok(BudgetReport {
        rows,
        full_body_params: full,
    })
}

fn full_body_count(
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
) -> Result<usize> {
    let config = configs
        .first()
        .ok_or_else(|| Error::InvalidConfig("no unit orders".into()))?;
    let top = level_mask(partition, config, config.level_count())?;
    Ok(count_breakdown(spec, &top)?.body())
}

/// Copies measured accuracies into matching report rows.
pub fn attach_accuracies(report: &mut BudgetReport, entries: &[(TaskId, usize, f64)]) {
    for &(task, level, acc) in entries {
        if let Some(row) = report
            .rows
            .iter_mut()
            .find(|r| r.task == task && r.level == level)
        {
            row.accuracy = Some(acc);
        }
    }
}

/// Largest level of `task` whose total parameter count fits the budget.
pub fn select_level(report: &BudgetReport, task: TaskId, max_params: usize) -> Result<usize> {
    let mut rows: Vec<&BudgetRow> = report.task_rows(task).collect();
    if rows.is_empty() {
        return Err(Error::UnknownTask(task.0));
    }
    rows.sort_by_key(|r| r.level);
    let minimum = rows[0].total_params;
    rows.iter()
        .rev()
        .find(|r| r.total_params <= max_params)
        .map(|r| r.level)
        .ok_or(Error::BudgetBelowMinimum {
            budget: max_params,
            minimum,
        })
}

/// CSV rendering:
/// `task,level,body_params,total_params,density,compression,latency_s,accuracy`.
pub fn report_csv(report: &BudgetReport) -> String {
    let mut out =
        String::from("task,level,body_params,total_params,density,compression,latency_s,accuracy\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.task,
            r.level,
            r.body_params,
            r.total_params,
            r.density,
            r.compression,
            r.latency_s.map_or(String::new(), |v| v.to_string()),
            r.accuracy.map_or(String::new(), |v| v.to_string()),
        ));
    }
    out
}

/// Human-readable table.
pub fn report_table(report: &BudgetReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>4} {:>5} {:>12} {:>12} {:>9} {:>12} {:>12} {:>9}\n",
        "task", "level", "body_params", "total_params", "density", "compression", "latency_us", "accuracy"
    ));
    for r in &report.rows {
        out.push_str(&format!(
            "{:>4} {:>5} {:>12} {:>12} {:>9.4} {:>11.2}x {:>12} {:>9}\n",
            r.task.0,
            r.level,
            r.body_params,
            r.total_params,
            r.density,
            r.compression,
            r.latency_s
                .map_or(String::from("-"), |v| format!("{:.2}", v * 1e6)),
            r.accuracy.map_or(String::from("-"), |v| format!("{:.4}", v)),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, LayerSpec, TaskInfo};
    use crate::partition::{derive_orders, UnitPartition};

    /// One 3x3 conv layer, 8 -> 8 channels, four equal units.
    fn conv_8_fixture() -> (BackboneSpec, UnitPartition, Vec<VirtualNetConfig>) {
        let body = vec![LayerSpec::conv(8, 8, 3, 1, false, true)];
        let tasks: Vec<TaskInfo> = (1..=4)
            .map(|i| TaskInfo {
                id: TaskId(i),
                class_count: 2,
                input_shape: vec![1, 8, 8],
            })
            .collect();
        let inputs: Vec<LayerSpec> = tasks
            .iter()
            .map(|_| LayerSpec::conv(1, 8, 3, 1, false, true))
            .collect();
        let partition = UnitPartition::equal(&[(8, 8)], 4).unwrap();
        let configs = derive_orders(4).unwrap();
        let spec = BackboneSpec::assemble(body, inputs, tasks, &partition, &configs).unwrap();
        (spec, partition, configs)
    }

    #[test]
    fn body_weight_counts_grow_quadratically() {
        let (spec, partition, configs) = conv_8_fixture();
        let counts: Vec<usize> = (1..=4)
            .map(|l| {
                let mask = level_mask(&partition, &configs[0], l).unwrap();
                count_breakdown(&spec, &mask).unwrap().body_weights
            })
            .collect();
        assert_eq!(counts, vec![36, 144, 324, 576]);
        for (l, &c) in counts.iter().enumerate() {
            assert_eq!(c, counts[0] * (l + 1) * (l + 1));
        }
    }

    #[test]
    fn full_mask_matches_unpartitioned_body_count() {
        let (spec, partition, configs) = conv_8_fixture();
        let top = level_mask(&partition, &configs[0], 4).unwrap();
        let b = count_breakdown(&spec, &top).unwrap();
        assert_eq!(b.body_weights, 8 * 8 * 9);
        assert_eq!(b.body_biases, 8);
    }

    #[test]
    fn interconnections_exceed_standalone_sums() {
        let (spec, partition, configs) = conv_8_fixture();
        // two single-unit masks vs the two-unit mask of task 1
        let m1 = level_mask(&partition, &configs[0], 1).unwrap();
        let m2 = level_mask(&partition, &configs[1], 1).unwrap();
        let pair = level_mask(&partition, &configs[0], 2).unwrap();
        let c1 = count_breakdown(&spec, &m1).unwrap().body_weights;
        let c2 = count_breakdown(&spec, &m2).unwrap().body_weights;
        let cpair = count_breakdown(&spec, &pair).unwrap().body_weights;
        assert!(c1 + c2 < cpair);
    }

    #[test]
    fn select_level_respects_bounds() {
        let rows: Vec<BudgetRow> = [(1usize, 36usize), (2, 144), (3, 324), (4, 576)]
            .iter()
            .map(|&(level, total)| BudgetRow {
                task: TaskId(1),
                level,
                body_params: total,
                total_params: total,
                density: 1.0,
                compression: 1.0,
                latency_s: None,
                accuracy: None,
            })
            .collect();
        let report = BudgetReport {
            rows,
            full_body_params: 576,
        };
        assert_eq!(select_level(&report, TaskId(1), 200).unwrap(), 2);
        assert_eq!(select_level(&report, TaskId(1), 324).unwrap(), 3);
        match select_level(&report, TaskId(1), 10) {
            Err(Error::BudgetBelowMinimum { minimum, .. }) => assert_eq!(minimum, 36),
            other => panic!("expected budget error, got {:?}", other),
        }
    }

    #[test]
    fn select_level_is_monotone_in_budget() {
        let (spec, partition, configs) = conv_8_fixture();
        let report = budget_table(&spec, &partition, &configs, None, &LatencyConfig::default())
            .unwrap();
        let mut prev = 0usize;
        let min = report.row(TaskId(2), 1).unwrap().total_params;
        for budget in (min..4000).step_by(37) {
            let level = select_level(&report, TaskId(2), budget).unwrap();
            assert!(level >= prev);
            prev = level;
        }
    }

    #[test]
    fn report_has_k_times_levels_rows() {
        let (spec, partition, configs) = conv_8_fixture();
        let report =
            budget_table(&spec, &partition, &configs, None, &LatencyConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 16);
        for config in &configs {
            let counts: Vec<usize> = report
                .task_rows(config.task)
                .map(|r| r.body_params)
                .collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]));
        }
        let top = report.row(TaskId(1), 4).unwrap();
        assert!((top.density - 1.0).abs() < 1e-12);
    }
}
