//! Training loops: joint multi-task, single-task nested, and two-phase
//! sequential with distillation; plus evaluation and per-epoch metrics.
//!
//! Per optimization step one fresh minibatch is drawn per task (independent
//! shuffles, reseeded per epoch), all terms are summed before a single
//! parameter update. Training is single-threaded per model instance and
//! deterministic given the seed; evaluation may fan out across test samples
//! because the correct-count reduction is order-independent.

mod distill;
mod objective;
mod sgd;

pub use distill::{distill_targets, DistillTargets, Snapshot};
pub use objective::{
    eval_objective, flat_term_plan, grad_objective, joint_grad, joint_loss, joint_term_plan,
    relu_kink_margin, sequential_grad, sequential_loss, sequential_term_plan, Batch, Feeds,
    LossBreakdown, TermKind, TermLoss, TermSpec,
};
pub use sgd::{sgd_step, SgdState, TrainConfig};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    apply_norm_updates, eval_logits, init_params, BackboneSpec, ModelParams,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::partition::{level_mask, LevelMask, TaskId, UnitPartition, VirtualNetConfig};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const EVAL_BATCH: usize = 256;
#[cfg(feature = "parallel")]
const PAR_EVAL_MIN_SAMPLES: usize = 2048;

/// Train/test datasets of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: TaskId,
    pub train: Dataset,
    pub test: Dataset,
}

/// All tasks' datasets, ordered by task id 1..=k.
#[derive(Clone, Debug)]
pub struct TaskBundle {
    pub tasks: Vec<TaskData>,
}

impl TaskBundle {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("bundle has no tasks".into()));
        }
        for (i, td) in self.tasks.iter().enumerate() {
            if td.task.0 != i + 1 {
                return Err(Error::InvalidConfig(format!(
                    "bundle tasks must be ordered 1..=k, position {} holds task {}",
                    i, td.task
                )));
            }
            for (split, ds) in [("train", &td.train), ("test", &td.test)] {
                ds.validate()
                    .map_err(|e| Error::Dataset(format!("task {} {}: {}", td.task, split, e)))?;
                if ds.class_count != td.train.class_count {
                    return Err(Error::Dataset(format!(
                        "task {} {} split disagrees on class count",
                        td.task, split
                    )));
                }
            }
            if td.train.feature_shape != td.test.feature_shape {
                return Err(Error::Dataset(format!(
                    "task {} splits disagree on feature shape",
                    td.task
                )));
            }
        }
        Ok(())
    }

    pub fn task(&self, task: TaskId) -> Result<&TaskData> {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .ok_or(Error::UnknownTask(task.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One metrics row: per epoch, task, level, and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub task: TaskId,
    pub level: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// CSV rendering of metric rows: `epoch,task,level,split,loss,accuracy`.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("epoch,task,level,split,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.task, r.level, r.split, r.loss, r.accuracy
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub task: TaskId,
    pub level: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: Vec<MetricRow>,
    pub final_accuracy: Vec<AccuracyEntry>,
}

#[derive(Clone, Debug)]
pub struct SequentialOutput {
    pub params: ModelParams,
    pub metrics: Vec<MetricRow>,
    /// Accuracies right before phase two, for forgetting measurement.
    pub snapshot_accuracy: Vec<AccuracyEntry>,
    pub final_accuracy: Vec<AccuracyEntry>,
    pub snapshot: Snapshot,
}

#[derive(Clone, Copy, Debug)]
pub struct SequentialOptions {
    /// Keep the distillation terms; `false` is the forgetting ablation.
    pub distill: bool,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
}

fn shuffle_rng(seed: u64, epoch: usize, task_index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(task_index as u64).to_le_bytes());
    key[24] = 0xB1;
    ChaCha8Rng::from_seed(key)
}

fn epoch_deck(samples: usize, seed: u64, epoch: usize, task_index: usize) -> Vec<usize> {
    let mut deck: Vec<usize> = (0..samples).collect();
    deck.shuffle(&mut shuffle_rng(seed, epoch, task_index));
    deck
}

/// Minibatch `step` from the deck, wrapping around when the deck is shorter
/// than the epoch's step count.
fn batch_indices(deck: &[usize], step: usize, batch_size: usize) -> Vec<usize> {
    let n = deck.len();
    let start = (step * batch_size) % n;
    (0..batch_size.min(n))
        .map(|o| deck[(start + o) % n])
        .collect()
}

fn make_batch(ds: &Dataset, indices: &[usize]) -> Result<Batch> {
    let (features, labels) = ds.gather(indices)?;
    Ok(Batch {
        features,
        labels,
        indices: indices.to_vec(),
    })
}

/// Fraction of samples whose argmax logit equals the label, eval-mode.
pub fn evaluate(
    params: &ModelParams,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    bundle: &TaskBundle,
    task: TaskId,
    level: usize,
) -> Result<f64> {
    let config = configs
        .iter()
        .find(|c| c.task == task)
        .ok_or(Error::UnknownTask(task.0))?;
    let mask = level_mask(partition, config, level)?;
    let data = &bundle.task(task)?.test;
    let (acc, _) = eval_split(params, spec, &mask, data)?;
    Ok(acc)
}

/// Accuracy and mean cross-entropy of a dataset under one mask.
pub fn eval_split(
    params: &ModelParams,
    spec: &BackboneSpec,
    mask: &LevelMask,
    data: &Dataset,
) -> Result<(f64, f64)> {
    let n = data.samples;
    if n == 0 {
        return Err(Error::Dataset("empty split".into()));
    }
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_BATCH)
        .map(|s| (s, (s + EVAL_BATCH).min(n)))
        .collect();

    let chunk = |&(start, end): &(usize, usize)| -> Result<(usize, f64)> {
        let idx: Vec<usize> = (start..end).collect();
        let (features, labels) = data.gather(&idx)?;
        let logits = eval_logits(params, spec, mask, &features)?;
        Ok(score_logits(&logits, &labels))
    };

    #[cfg(feature = "parallel")]
    let partials: Vec<(usize, f64)> = if n >= PAR_EVAL_MIN_SAMPLES {
        ranges
            .par_iter()
            .map(chunk)
            .collect::<Result<Vec<_>>>()?
    } else {
        ranges.iter().map(chunk).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<(usize, f64)> = ranges.iter().map(chunk).collect::<Result<Vec<_>>>()?;

    let correct: usize = partials.iter().map(|p| p.0).sum();
    let loss_sum: f64 = partials.iter().map(|p| p.1).sum();
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

/// `(correct count, summed cross-entropy)` for one logits batch.
fn score_logits(logits: &Tensor, labels: &[u32]) -> (usize, f64) {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut correct = 0;
    let mut loss = 0.0;
    for i in 0..b {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] as usize {
            correct += 1;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i] as usize];
    }
    (correct, loss)
}

/// One optimization step: forward, fold batch statistics into the running
/// statistics, backward, decay, parameter update, clear gradients.
fn train_step(
    params: &mut ModelParams,
    spec: &BackboneSpec,
    terms: &[TermSpec],
    feeds: &Feeds,
    cfg: &TrainConfig,
    epoch: usize,
    state: &mut SgdState,
) -> Result<LossBreakdown> {
    let (breakdown, grads, hooks_applied) = {
        let mut built =
            objective::build_objective(params, spec, terms, feeds, crate::backbone::ForwardMode::Train)?;
        let terminal = built.tape.forward_eval()?.scalar_value()?;
        built.tape.backward_eval()?;
        let decay = if cfg.weight_decay == 0.0 {
            0.0
        } else {
            0.5 * cfg.weight_decay * params.squared_norm()
        };
        let mut term_losses = Vec::with_capacity(terms.len());
        for (term, &node) in terms.iter().zip(&built.term_nodes) {
            term_losses.push(TermLoss {
                task: term.task,
                level: term.level,
                kind: term.kind,
                value: built.tape.scalar(node)?,
            });
        }
        let b = LossBreakdown {
            total: terminal + decay,
            decay,
            terms: term_losses,
        };
        (b, built.tape.param_grads(), (built.tape, built.hooks))
    };
    let (tape, hooks) = hooks_applied;
    apply_norm_updates(params, &tape, &hooks);
    objective::apply_gradients(params, &grads, cfg.weight_decay);
    sgd_step(params, state, cfg, epoch);
    params.zero_grads();
    Ok(breakdown)
}

struct EpochPlan<'a> {
    /// `(task, dataset, deck)` for every task that feeds minibatches.
    feeds_from: Vec<(TaskId, &'a Dataset)>,
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    params: &mut ModelParams,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    bundle: &TaskBundle,
    terms: &[TermSpec],
    plan: &EpochPlan,
    cfg: &TrainConfig,
    epochs: usize,
    epoch_offset: usize,
    state: &mut SgdState,
    targets: Option<&DistillTargets>,
    metrics: &mut Vec<MetricRow>,
    eval_tasks: &[TaskId],
) -> Result<()> {
    for local_epoch in 0..epochs {
        let epoch = epoch_offset + local_epoch;
        let decks: Vec<Vec<usize>> = plan
            .feeds_from
            .iter()
            .map(|(task, ds)| epoch_deck(ds.samples, cfg.seed, epoch, task.index()))
            .collect();
        let steps = plan
            .feeds_from
            .iter()
            .map(|(_, ds)| ds.samples.div_ceil(cfg.batch_size))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut term_sums: BTreeMap<(TaskId, usize), (f64, usize)> = BTreeMap::new();
        for step in 0..steps {
            let batches: Vec<(TaskId, Batch)> = plan
                .feeds_from
                .iter()
                .zip(&decks)
                .map(|((task, ds), deck)| {
                    Ok((*task, make_batch(ds, &batch_indices(deck, step, cfg.batch_size))?))
                })
                .collect::<Result<Vec<_>>>()?;
            let feed_map: BTreeMap<TaskId, &Batch> =
                batches.iter().map(|(t, b)| (*t, b)).collect();
            let feeds = Feeds {
                batches: feed_map,
                targets,
                temperature: cfg.temperature,
            };
            let breakdown = train_step(params, spec, terms, &feeds, cfg, local_epoch, state)?;
            for term in &breakdown.terms {
                let entry = term_sums.entry((term.task, term.level)).or_insert((0.0, 0));
                entry.0 += term.value;
                entry.1 += 1;
            }
        }
        // per-epoch test metrics for every (task, level); train rows carry
        // the epoch-mean minibatch loss of the matching term
        for &task in eval_tasks {
            let config = configs
                .iter()
                .find(|c| c.task == task)
                .ok_or(Error::UnknownTask(task.0))?;
            for level in 1..=config.level_count() {
                let mask = level_mask(partition, config, level)?;
                let td = bundle.task(task)?;
                let (test_acc, test_loss) = eval_split(params, spec, &mask, &td.test)?;
                metrics.push(MetricRow {
                    epoch,
                    task,
                    level,
                    split: Split::Test,
                    loss: test_loss,
                    accuracy: test_acc,
                });
                if let Some(&(sum, count)) = term_sums.get(&(task, level)) {
                    let (train_acc, _) = eval_split(params, spec, &mask, &td.train)?;
                    metrics.push(MetricRow {
                        epoch,
                        task,
                        level,
                        split: Split::Train,
                        loss: sum / count.max(1) as f64,
                        accuracy: train_acc,
                    });
                }
            }
        }
    }
    Ok(())
}

fn final_accuracies(
    metrics: &[MetricRow],
    configs: &[VirtualNetConfig],
    tasks: &[TaskId],
    last_epoch: usize,
) -> Vec<AccuracyEntry> {
    let mut out = Vec::new();
    for &task in tasks {
        let n_h = configs
            .iter()
            .find(|c| c.task == task)
            .map(|c| c.level_count())
            .unwrap_or(0);
        for level in 1..=n_h {
            if let Some(row) = metrics.iter().find(|r| {
                r.epoch == last_epoch && r.task == task && r.level == level && r.split == Split::Test
            }) {
                out.push(AccuracyEntry {
                    task,
                    level,
                    accuracy: row.accuracy,
                });
            }
        }
    }
    out
}

/// Joint training over all tasks: every step draws one minibatch per task
/// and sums the full grid of (task, level) terms before one update. Records
/// per-epoch test accuracy for every (task, level).
pub fn train_joint(
    bundle: &TaskBundle,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    bundle.validate()?;
    if bundle.tasks.len() != configs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} tasks in bundle, {} unit orders",
            bundle.tasks.len(),
            configs.len()
        )));
    }
    let terms = joint_term_plan(partition, configs)?;
    let mut params = init_params(spec, cfg.seed)?;
    let mut state = SgdState::new();
    let mut metrics = Vec::new();
    let plan = EpochPlan {
        feeds_from: bundle.tasks.iter().map(|t| (t.task, &t.train)).collect(),
    };
    let eval_tasks: Vec<TaskId> = configs.iter().map(|c| c.task).collect();
    run_epochs(
        &mut params,
        spec,
        partition,
        configs,
        bundle,
        &terms,
        &plan,
        cfg,
        cfg.epochs,
        0,
        &mut state,
        None,
        &mut metrics,
        &eval_tasks,
    )?;
    let final_accuracy = final_accuracies(&metrics, configs, &eval_tasks, cfg.epochs.saturating_sub(1));
    Ok(TrainOutput {
        params,
        metrics,
        final_accuracy,
    })
}

/// Single-task mode: one task whose hierarchy spans all `k` units in natural
/// order; the objective is the sum of its `n_h` level losses.
pub fn train_single(
    bundle: &TaskBundle,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    if bundle.tasks.len() != 1 {
        return Err(Error::InvalidConfig(
            "single-task mode takes exactly one task".into(),
        ));
    }
    let configs = vec![natural_order_config(partition, TaskId(1))];
    train_joint(bundle, spec, partition, &configs, cfg)
}

/// Order (1, 2, ..., k) for a lone task.
pub fn natural_order_config(partition: &UnitPartition, task: TaskId) -> VirtualNetConfig {
    VirtualNetConfig {
        task,
        order: (1..=partition.unit_count())
            .map(crate::partition::UnitId)
            .collect(),
    }
}

/// Two-phase sequential training. Phase one trains the old tasks' virtual
/// networks jointly (their losses only) on an architecture that already
/// holds every unit. A snapshot is taken, soft targets are recorded on the
/// new task's inputs, and phase two optimizes the distillation-plus-new-task
/// objective over all parameters. Optimizer state restarts between phases;
/// the schedule is indexed per phase.
pub fn train_sequential(
    bundle: &TaskBundle,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    cfg: &TrainConfig,
    opts: &SequentialOptions,
) -> Result<SequentialOutput> {
    cfg.validate()?;
    bundle.validate()?;
    let k = configs.len();
    if bundle.tasks.len() != k || k < 2 {
        return Err(Error::InvalidConfig(
            "sequential mode needs >= 2 tasks matching the unit orders".into(),
        ));
    }
    let new_task = configs[k - 1].task;
    let old_configs = &configs[..k - 1];
    let eval_tasks: Vec<TaskId> = configs.iter().map(|c| c.task).collect();
    let old_tasks: Vec<TaskId> = old_configs.iter().map(|c| c.task).collect();

    // phase one: old tasks only
    let mut params = init_params(spec, cfg.seed)?;
    let mut state = SgdState::new();
    let mut metrics = Vec::new();
    let phase1_terms = joint_term_plan(partition, old_configs)?;
    let plan1 = EpochPlan {
        feeds_from: old_tasks
            .iter()
            .map(|&t| Ok((t, &bundle.task(t)?.train)))
            .collect::<Result<Vec<_>>>()?,
    };
    run_epochs(
        &mut params,
        spec,
        partition,
        configs,
        bundle,
        &phase1_terms,
        &plan1,
        cfg,
        opts.phase1_epochs,
        0,
        &mut state,
        None,
        &mut metrics,
        &old_tasks,
    )?;

    // snapshot: frozen params + soft targets on the new task's inputs
    let new_train = &bundle.task(new_task)?.train;
    let all_new_indices: Vec<usize> = (0..new_train.samples).collect();
    let (new_features, _) = new_train.gather(&all_new_indices)?;
    let targets = distill_targets(
        &params,
        spec,
        partition,
        old_configs,
        &new_features,
        cfg.temperature,
    )?;
    let snapshot = Snapshot {
        params: params.clone(),
        targets,
    };
    let mut snapshot_accuracy = Vec::new();
    for config in configs {
        for level in 1..=config.level_count() {
            let mask = level_mask(partition, config, level)?;
            let (acc, _) = eval_split(&params, spec, &mask, &bundle.task(config.task)?.test)?;
            snapshot_accuracy.push(AccuracyEntry {
                task: config.task,
                level,
                accuracy: acc,
            });
        }
    }

    // phase two: distillation + new-task terms, minibatches from the new task
    let phase2_terms = sequential_term_plan(partition, configs, new_task, opts.distill)?;
    let plan2 = EpochPlan {
        feeds_from: vec![(new_task, new_train)],
    };
    let mut state2 = SgdState::new();
    run_epochs(
        &mut params,
        spec,
        partition,
        configs,
        bundle,
        &phase2_terms,
        &plan2,
        cfg,
        opts.phase2_epochs,
        opts.phase1_epochs,
        &mut state2,
        if opts.distill {
            Some(&snapshot.targets)
        } else {
            None
        },
        &mut metrics,
        &eval_tasks,
    )?;

    let last_epoch = opts.phase1_epochs + opts.phase2_epochs - 1;
    let final_accuracy = final_accuracies(&metrics, configs, &eval_tasks, last_epoch);
    Ok(SequentialOutput {
        params,
        metrics,
        snapshot_accuracy,
        final_accuracy,
        snapshot,
    })
}
