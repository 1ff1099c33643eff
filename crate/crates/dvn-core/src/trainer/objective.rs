//! Training objectives as sums of per-(task, level) loss terms.
//!
//! The joint objective sums a labeled cross-entropy term for every task at
//! every level of its hierarchy, so one backward pass aggregates, per unit,
//! exactly the gradients of the terms whose masks include it: a term
//! contributes nothing below a unit's entry level, and nothing to an
//! interconnection block until both endpoints are present.
//!
//! The sequential objective replaces old tasks' labeled terms with
//! distillation terms against recorded soft targets, keeping the new task's
//! labeled terms; with one level and full masks it reduces to flat
//! learning-without-forgetting.
//!
//! L2 decay `(lambda/2) |W|^2` over every trainable tensor is added once to
//! the total (not per term) and enters the gradient as `lambda w`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    build_masked_logits, BackboneSpec, ForwardMode, ModelParams, ParamBinder,
};
use crate::error::{Error, Result};
use crate::partition::{full_mask, level_mask, LevelMask, TaskId, UnitPartition, VirtualNetConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::trainer::distill::DistillTargets;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// Cross-entropy against integer labels.
    Labeled,
    /// Soft-target cross-entropy against recorded distributions.
    Distill,
}

/// One loss term: a (task, level) mask, the task whose minibatch feeds it,
/// and the loss flavor.
#[derive(Clone, Debug)]
pub struct TermSpec {
    pub task: TaskId,
    pub level: usize,
    pub mask: LevelMask,
    /// Task whose minibatch provides the inputs (and labels, when labeled).
    pub input_task: TaskId,
    pub kind: TermKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermLoss {
    pub task: TaskId,
    pub level: usize,
    pub kind: TermKind,
    pub value: f64,
}

/// Objective value split into its parts; `total = sum(terms) + decay`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub decay: f64,
    pub terms: Vec<TermLoss>,
}

/// A per-task minibatch: stacked features, labels, and the sample indices in
/// the task's training set (used to line up distillation targets).
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub indices: Vec<usize>,
}

/// Input bindings for an objective evaluation.
pub struct Feeds<'a> {
    pub batches: BTreeMap<TaskId, &'a Batch>,
    pub targets: Option<&'a DistillTargets>,
    pub temperature: f64,
}

impl<'a> Feeds<'a> {
    pub fn labeled(batches: BTreeMap<TaskId, &'a Batch>) -> Self {
        Feeds {
            batches,
            targets: None,
            temperature: 1.0,
        }
    }

    fn batch(&self, task: TaskId) -> Result<&'a Batch> {
        self.batches
            .get(&task)
            .copied()
            .ok_or(Error::UnknownTask(task.0))
    }
}

/// The joint plan: every task at every level, each fed by its own minibatch.
pub fn joint_term_plan(
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
) -> Result<Vec<TermSpec>> {
    let mut terms = Vec::new();
    for config in configs {
        for level in 1..=config.level_count() {
            terms.push(TermSpec {
                task: config.task,
                level,
                mask: level_mask(partition, config, level)?,
                input_task: config.task,
                kind: TermKind::Labeled,
            });
        }
    }
    Ok(terms)
}

/// The sequential plan: distillation terms for every old task at every level
/// plus labeled terms for the new task, all fed by the new task's minibatch.
/// `include_distill = false` drops the distillation terms (the ablation).
pub fn sequential_term_plan(
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    new_task: TaskId,
    include_distill: bool,
) -> Result<Vec<TermSpec>> {
    let mut terms = Vec::new();
    for config in configs {
        let kind = if config.task == new_task {
            TermKind::Labeled
        } else if include_distill {
            TermKind::Distill
        } else {
            continue;
        };
        for level in 1..=config.level_count() {
            terms.push(TermSpec {
                task: config.task,
                level,
                mask: level_mask(partition, config, level)?,
                input_task: new_task,
                kind,
            });
        }
    }
    Ok(terms)
}

/// Flat single-level plan: every task sees the whole body through a full
/// mask (the learning-without-forgetting reduction).
pub fn flat_term_plan(
    partition: &UnitPartition,
    tasks: &[TaskId],
    new_task: TaskId,
) -> Vec<TermSpec> {
    tasks
        .iter()
        .map(|&task| TermSpec {
            task,
            level: 1,
            mask: full_mask(partition, task, 1),
            input_task: new_task,
            kind: if task == new_task {
                TermKind::Labeled
            } else {
                TermKind::Distill
            },
        })
        .collect()
}

pub(crate) struct BuiltObjective {
    pub tape: Tape,
    pub hooks: Vec<crate::backbone::NormHook>,
    pub term_nodes: Vec<NodeId>,
}

/// Records the full objective graph: one masked forward per term, a loss node
/// per term, and a terminal sum.
pub(crate) fn build_objective(
    params: &ModelParams,
    spec: &BackboneSpec,
    terms: &[TermSpec],
    feeds: &Feeds,
    mode: ForwardMode,
) -> Result<BuiltObjective> {
    if terms.is_empty() {
        return Err(Error::InvalidConfig("objective has no terms".into()));
    }
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let mut input_nodes: BTreeMap<TaskId, NodeId> = BTreeMap::new();
    let mut hooks = Vec::new();
    let mut term_nodes = Vec::with_capacity(terms.len());
    for term in terms {
        let batch = feeds.batch(term.input_task)?;
        let input = *input_nodes
            .entry(term.input_task)
            .or_insert_with(|| tape.input(&batch.features));
        let (logits, term_hooks) =
            build_masked_logits(&mut tape, &mut binder, spec, params, &term.mask, input, mode)?;
        hooks.extend(term_hooks);
        let loss = match term.kind {
            TermKind::Labeled => {
                let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
                tape.softmax_cross_entropy(logits, &labels)
            }
            TermKind::Distill => {
                let targets = feeds.targets.ok_or(Error::MissingTargets {
                    task: term.task.0,
                    level: term.level,
                    index: 0,
                })?;
                let rows = targets.rows(term.task, term.level, &batch.indices)?;
                tape.soft_target_cross_entropy(logits, &rows, feeds.temperature)
            }
        };
        term_nodes.push(loss);
    }
    tape.add_n(&term_nodes);
    Ok(BuiltObjective {
        tape,
        hooks,
        term_nodes,
    })
}

fn breakdown(
    tape: &Tape,
    terms: &[TermSpec],
    term_nodes: &[NodeId],
    decay: f64,
    terminal: f64,
) -> Result<LossBreakdown> {
    let mut out = Vec::with_capacity(terms.len());
    for (term, &node) in terms.iter().zip(term_nodes) {
        out.push(TermLoss {
            task: term.task,
            level: term.level,
            kind: term.kind,
            value: tape.scalar(node)?,
        });
    }
    Ok(LossBreakdown {
        total: terminal + decay,
        decay,
        terms: out,
    })
}

fn decay_value(params: &ModelParams, weight_decay: f64) -> f64 {
    if weight_decay == 0.0 {
        0.0
    } else {
        0.5 * weight_decay * params.squared_norm()
    }
}

/// Distance of the objective's relu pre-activations from their kink, at the
/// given parameters. Finite-difference gradient checks must pick parameter
/// points where this margin exceeds the probe step.
pub fn relu_kink_margin(
    params: &ModelParams,
    spec: &BackboneSpec,
    terms: &[TermSpec],
    feeds: &Feeds,
) -> Result<Option<f64>> {
    let mut built = build_objective(params, spec, terms, feeds, ForwardMode::Train)?;
    built.tape.forward_eval()?;
    Ok(built.tape.relu_input_min_abs())
}

/// Objective value and per-term breakdown; no side effects.
/// Normalization (when present) uses batch statistics, matching training.
pub fn eval_objective(
    params: &ModelParams,
    spec: &BackboneSpec,
    terms: &[TermSpec],
    feeds: &Feeds,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let mut built = build_objective(params, spec, terms, feeds, ForwardMode::Train)?;
    let terminal = built.tape.forward_eval()?.scalar_value()?;
    breakdown(
        &built.tape,
        terms,
        &built.term_nodes,
        decay_value(params, weight_decay),
        terminal,
    )
}

/// One forward and one backward pass over the summed objective. Gradients
/// (including the decay contribution `lambda w`) accumulate additively into
/// the parameter tensors' grad slots. Running statistics are not touched;
/// the training loop owns those updates.
pub fn grad_objective(
    params: &mut ModelParams,
    spec: &BackboneSpec,
    terms: &[TermSpec],
    feeds: &Feeds,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = {
        let mut built = build_objective(params, spec, terms, feeds, ForwardMode::Train)?;
        let terminal = built.tape.forward_eval()?.scalar_value()?;
        built.tape.backward_eval()?;
        let b = breakdown(
            &built.tape,
            terms,
            &built.term_nodes,
            decay_value(params, weight_decay),
            terminal,
        )?;
        (b, built.tape.param_grads())
    };
    apply_gradients(params, &grads, weight_decay);
    Ok(breakdown)
}

pub(crate) fn apply_gradients(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    weight_decay: f64,
) {
    for (name, tensor) in params.named_tensors_mut() {
        if let Some(g) = grads.get(&name) {
            tensor.accumulate_grad(g);
        }
        if weight_decay != 0.0 {
            let decay: Vec<f64> = tensor.data().iter().map(|&w| weight_decay * w).collect();
            tensor.accumulate_grad(&decay);
        }
    }
}

fn batches_by_task<'a>(
    configs: &[VirtualNetConfig],
    batches: &'a [Batch],
) -> Result<BTreeMap<TaskId, &'a Batch>> {
    if batches.len() != configs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} minibatches for {} tasks",
            batches.len(),
            configs.len()
        )));
    }
    Ok(configs
        .iter()
        .map(|c| c.task)
        .zip(batches.iter())
        .collect())
}

/// Joint multi-task objective: the sum of `k x n_h` labeled cross-entropy
/// terms plus global decay. With one task this is the single-task nested
/// objective over its levels.
pub fn joint_loss(
    params: &ModelParams,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    batches: &[Batch],
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let terms = joint_term_plan(partition, configs)?;
    let feeds = Feeds::labeled(batches_by_task(configs, batches)?);
    eval_objective(params, spec, &terms, &feeds, weight_decay)
}

/// Gradient of the joint objective via one backward pass; accumulates into
/// the parameter grad slots and returns the loss breakdown.
pub fn joint_grad(
    params: &mut ModelParams,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    batches: &[Batch],
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let terms = joint_term_plan(partition, configs)?;
    let feeds = Feeds::labeled(batches_by_task(configs, batches)?);
    grad_objective(params, spec, &terms, &feeds, weight_decay)
}

/// Sequential objective: distillation terms for old tasks at every level,
/// labeled terms for the new task, all on the new task's minibatch.
pub fn sequential_loss(
    params: &ModelParams,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    new_task: TaskId,
    new_batch: &Batch,
    targets: &DistillTargets,
    temperature: f64,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let terms = sequential_term_plan(partition, configs, new_task, true)?;
    let mut batches = BTreeMap::new();
    batches.insert(new_task, new_batch);
    let feeds = Feeds {
        batches,
        targets: Some(targets),
        temperature,
    };
    eval_objective(params, spec, &terms, &feeds, weight_decay)
}

/// Gradient of the sequential objective via one backward pass.
#[allow(clippy::too_many_arguments)]
pub fn sequential_grad(
    params: &mut ModelParams,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    configs: &[VirtualNetConfig],
    new_task: TaskId,
    new_batch: &Batch,
    targets: &DistillTargets,
    temperature: f64,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let terms = sequential_term_plan(partition, configs, new_task, true)?;
    let mut batches = BTreeMap::new();
    batches.insert(new_task, new_batch);
    let feeds = Feeds {
        batches,
        targets: Some(targets),
        temperature,
    };
    grad_objective(params, spec, &terms, &feeds, weight_decay)
}
