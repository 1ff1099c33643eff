//! Masked forward pass: task input layer -> body restricted to the mask's
//! channel blocks (diagonal unit blocks plus interconnections among included
//! units) -> global mean pool -> (task, level) head.
//!
//! Weights are sliced with gather nodes, so a term's gradient can only reach
//! the selected blocks; everything outside a mask stays bitwise untouched.

use std::collections::BTreeMap;

use crate::backbone::{
    BackboneSpec, LayerKind, LayerSpec, ModelParams, NormKey, NormSite,
};
use crate::error::{Error, Result};
use crate::partition::LevelMask;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Normalization from batch statistics; running statistics get updated.
    Train,
    /// Normalization from running statistics; no side effects.
    Eval,
}

/// Deduplicates parameter leaves so a tensor used by several loss terms is
/// bound once and its gradients aggregate on a single accumulator.
#[derive(Default)]
pub(crate) struct ParamBinder {
    bound: BTreeMap<String, NodeId>,
}

impl ParamBinder {
    pub(crate) fn new() -> Self {
        ParamBinder::default()
    }

    pub(crate) fn bind(&mut self, tape: &mut Tape, name: String, tensor: &Tensor) -> NodeId {
        if let Some(&id) = self.bound.get(&name) {
            return id;
        }
        let id = tape.param(&name, tensor);
        self.bound.insert(name, id);
        id
    }
}

/// A batch-mode normalization node whose statistics should be folded into the
/// running statistics after the forward pass.
pub(crate) struct NormHook {
    pub key: NormKey,
    pub node: NodeId,
}

struct LayerStep<'a> {
    spec: &'a LayerSpec,
    weight_name: String,
    bias_name: String,
    weight: &'a Tensor,
    bias: &'a Tensor,
    /// Selected input channels, `None` for all.
    rows: Option<Vec<usize>>,
    /// Selected output channels, `None` for all.
    cols: Option<Vec<usize>>,
    norm_key: Option<NormKey>,
}

/// Records the masked forward graph for one (task, level) and returns the
/// logits node plus the normalization hooks encountered.
pub(crate) fn build_masked_logits(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    spec: &BackboneSpec,
    params: &ModelParams,
    mask: &LevelMask,
    batch: NodeId,
    mode: ForwardMode,
) -> Result<(NodeId, Vec<NormHook>)> {
    let ti = spec.task_index(mask.task)?;
    if mask.layers.len() != spec.body.len() {
        return Err(Error::InvalidBackbone(format!(
            "mask covers {} layers, body has {}",
            mask.layers.len(),
            spec.body.len()
        )));
    }
    let level = mask.level;
    let head = spec.head(mask.task, level)?;
    let last_out = mask.layers.last().expect("non-empty body").outputs.clone();
    if head.in_features != last_out.len() {
        return Err(Error::InvalidBackbone(format!(
            "head of task {} level {} expects {} features, mask selects {}",
            mask.task,
            level,
            head.in_features,
            last_out.len()
        )));
    }

    let mut steps: Vec<LayerStep> = Vec::with_capacity(spec.body.len() + 1);
    // task-specific input layer, unpartitioned but trimmed to the channels
    // the first body layer will consume
    let stem_cols = &mask.layers[0].inputs;
    steps.push(LayerStep {
        spec: &spec.input_layers[ti],
        weight_name: format!("input.{}.weight", ti + 1),
        bias_name: format!("input.{}.bias", ti + 1),
        weight: &params.input[ti].weight,
        bias: &params.input[ti].bias,
        rows: None,
        cols: trimmed(stem_cols, spec.input_layers[ti].out_channels),
        norm_key: spec.input_layers[ti].followed_by_norm.then_some(NormKey {
            task: mask.task,
            level,
            site: NormSite::Input,
        }),
    });
    for (r, layer) in spec.body.iter().enumerate() {
        steps.push(LayerStep {
            spec: layer,
            weight_name: format!("body.{}.weight", r),
            bias_name: format!("body.{}.bias", r),
            weight: &params.body[r].weight,
            bias: &params.body[r].bias,
            rows: trimmed(&mask.layers[r].inputs, layer.in_channels),
            cols: trimmed(&mask.layers[r].outputs, layer.out_channels),
            norm_key: layer.followed_by_norm.then_some(NormKey {
                task: mask.task,
                level,
                site: NormSite::Body(r),
            }),
        });
    }

    let mut hooks = Vec::new();
    let mut x = batch;
    for step in steps {
        let w_full = binder.bind(tape, step.weight_name, step.weight);
        let b_full = binder.bind(tape, step.bias_name, step.bias);
        let (w, b) = match (&step.rows, &step.cols) {
            (None, None) => (w_full, b_full),
            (rows, cols) => (
                tape.gather_block(w_full, rows.as_deref(), cols.as_deref()),
                match cols {
                    Some(c) => tape.gather_block(b_full, None, Some(c)),
                    None => b_full,
                },
            ),
        };
        x = match step.spec.kind {
            LayerKind::Dense => tape.matmul(x, w),
            LayerKind::Conv2d => tape.conv2d(x, w, step.spec.stride.expect("validated")),
        };
        x = tape.bias_add(x, b);
        if let Some(key) = step.norm_key {
            let np = params.norm(key).ok_or_else(|| {
                Error::InvalidBackbone(format!(
                    "missing norm parameters for task {} level {} site {}",
                    key.task, key.level, key.site
                ))
            })?;
            let scale = binder.bind(tape, super::norm_name(&key, "scale"), &np.scale);
            let shift = binder.bind(tape, super::norm_name(&key, "shift"), &np.shift);
            x = match mode {
                ForwardMode::Train => {
                    let node = tape.channel_norm_batch(x, scale, shift);
                    hooks.push(NormHook { key, node });
                    node
                }
                ForwardMode::Eval => tape.channel_norm_frozen(
                    x,
                    scale,
                    shift,
                    &np.running_mean,
                    &np.running_var,
                ),
            };
        }
        if step.spec.followed_by_relu {
            x = tape.relu(x);
        }
    }

    let pooled = tape.mean_pool(x);
    let head_w = binder.bind(
        tape,
        format!("head.{}.{}.weight", ti + 1, level),
        &params.heads[ti][level - 1].weight,
    );
    let head_b = binder.bind(
        tape,
        format!("head.{}.{}.bias", ti + 1, level),
        &params.heads[ti][level - 1].bias,
    );
    let logits = tape.matmul(pooled, head_w);
    let logits = tape.bias_add(logits, head_b);
    Ok((logits, hooks))
}

/// `None` when the selection covers every channel (gather becomes identity).
fn trimmed(selected: &[usize], total: usize) -> Option<Vec<usize>> {
    if selected.len() == total {
        None
    } else {
        Some(selected.to_vec())
    }
}

/// Folds cached batch statistics into the running statistics.
pub(crate) fn apply_norm_updates(
    params: &mut ModelParams,
    tape: &Tape,
    hooks: &[NormHook],
) {
    for hook in hooks {
        if let Some((mean, var)) = tape.norm_batch_stats(hook.node) {
            let (mean, var) = (mean.to_vec(), var.to_vec());
            if let Some(np) = params.norms.get_mut(&hook.key) {
                np.update_running(&mean, &var);
            }
        }
    }
}

fn check_batch(spec: &BackboneSpec, task_index: usize, batch: &Tensor) -> Result<()> {
    let want = &spec.tasks[task_index].input_shape;
    let got = &batch.shape()[1..];
    if got != want.as_slice() {
        return Err(Error::InvalidBackbone(format!(
            "task {} expects per-sample shape {:?}, batch has {:?}",
            spec.tasks[task_index].id, want, got
        )));
    }
    Ok(())
}

/// Runs the masked forward pass and returns logits of shape
/// `(batch, class_count)`. In train mode the per-(task, level) normalization
/// statistics are updated from the batch; eval mode is side-effect free.
pub fn forward_logits(
    params: &mut ModelParams,
    spec: &BackboneSpec,
    mask: &LevelMask,
    batch: &Tensor,
    mode: ForwardMode,
) -> Result<Tensor> {
    check_batch(spec, spec.task_index(mask.task)?, batch)?;
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let input = tape.input(batch);
    let (logits, hooks) = build_masked_logits(&mut tape, &mut binder, spec, params, mask, input, mode)?;
    let out = tape.forward_eval()?;
    debug_assert_eq!(logits + 1, tape.len(), "logits are terminal");
    if mode == ForwardMode::Train {
        apply_norm_updates(params, &tape, &hooks);
    }
    Ok(out)
}

/// Eval-mode forward over shared, read-only parameters.
pub fn eval_logits(
    params: &ModelParams,
    spec: &BackboneSpec,
    mask: &LevelMask,
    batch: &Tensor,
) -> Result<Tensor> {
    check_batch(spec, spec.task_index(mask.task)?, batch)?;
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let input = tape.input(batch);
    let (_logits, _hooks) = build_masked_logits(
        &mut tape,
        &mut binder,
        spec,
        params,
        mask,
        input,
        ForwardMode::Eval,
    )?;
    tape.forward_eval()
}
