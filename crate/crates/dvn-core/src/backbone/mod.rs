//! The physical network: layer specifications, the shared partitioned body,
//! task-specific input layers, and one dense classifier head per
//! (task, level).
//!
//! The body is the only partitioned part. Input layers are task-specific and
//! unpartitioned; every task's input layer must produce the same output
//! dimensions (input scales are equalized by the stride). Each head consumes
//! a global mean pool over the channels its mask selects, which gives every
//! level a compatible head with a single rule.
//!
//! Normalization parameters and running statistics are kept per
//! (task, level, layer) over the masked channel set: statistics differ
//! materially across masks, so sharing them would corrupt lower levels.

mod forward;
mod io;

pub use forward::{eval_logits, forward_logits, ForwardMode};
pub(crate) use forward::{apply_norm_updates, build_masked_logits, NormHook, ParamBinder};
pub use io::{load_params, save_params, ParamsManifest};

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{level_mask, TaskId, UnitPartition, VirtualNetConfig};
use crate::tensor::Tensor;

/// Exponential factor for running-statistics updates in train mode.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
}

/// One layer of the body or one task-specific input layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel size; convolution only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    /// Stride; convolution only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub followed_by_norm: bool,
    pub followed_by_relu: bool,
}

impl LayerSpec {
    pub fn dense(in_channels: usize, out_channels: usize, norm: bool, relu: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_channels,
            out_channels,
            kernel: None,
            stride: None,
            followed_by_norm: norm,
            followed_by_relu: relu,
        }
    }

    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        relu: bool,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            in_channels,
            out_channels,
            kernel: Some(kernel),
            stride: Some(stride),
            followed_by_norm: norm,
            followed_by_relu: relu,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidBackbone(format!("{}: zero channels", what)));
        }
        match self.kind {
            LayerKind::Dense => {
                if self.kernel.is_some() || self.stride.is_some() {
                    return Err(Error::InvalidBackbone(format!(
                        "{}: dense layers carry no kernel/stride",
                        what
                    )));
                }
            }
            LayerKind::Conv2d => {
                if self.kernel.unwrap_or(0) == 0 || self.stride.unwrap_or(0) == 0 {
                    return Err(Error::InvalidBackbone(format!(
                        "{}: convolution needs kernel and stride >= 1",
                        what
                    )));
                }
            }
        }
        Ok(())
    }

    /// Weight tensor shape: `(kernel, kernel, in, out)` for convolution,
    /// `(in, out)` for dense.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.in_channels, self.out_channels],
            LayerKind::Conv2d => {
                let k = self.kernel.expect("validated");
                vec![k, k, self.in_channels, self.out_channels]
            }
        }
    }

    /// Output shape (without batch dim) for an input of `shape`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Dense => {
                if input.len() != 1 || input[0] != self.in_channels {
                    return Err(Error::InvalidBackbone(format!(
                        "dense layer expects [{}], got {:?}",
                        self.in_channels, input
                    )));
                }
                Ok(vec![self.out_channels])
            }
            LayerKind::Conv2d => {
                let k = self.kernel.expect("validated");
                let s = self.stride.expect("validated");
                if input.len() != 3 || input[0] != self.in_channels {
                    return Err(Error::InvalidBackbone(format!(
                        "conv layer expects [{}, h, w], got {:?}",
                        self.in_channels, input
                    )));
                }
                let (h, w) = (input[1], input[2]);
                if h < k || w < k {
                    return Err(Error::InvalidBackbone(format!(
                        "input {}x{} smaller than kernel {}",
                        h, w, k
                    )));
                }
                Ok(vec![self.out_channels, (h - k) / s + 1, (w - k) / s + 1])
            }
        }
    }
}

/// A task: identifier, class count, and per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: TaskId,
    pub class_count: usize,
    pub input_shape: Vec<usize>,
}

/// Dense classifier head on top of one (task, level) mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_features: usize,
    pub classes: usize,
}

/// Where a normalization sits: after the task input layer or after body
/// layer r.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSite {
    Input,
    Body(usize),
}

impl std::fmt::Display for NormSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormSite::Input => write!(f, "in"),
            NormSite::Body(r) => write!(f, "body{}", r),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NormKey {
    pub task: TaskId,
    pub level: usize,
    pub site: NormSite,
}

/// Channel width of one per-(task, level, site) normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormWidth {
    pub key: NormKey,
    pub channels: usize,
}

/// The full physical-network description. Heads and normalization widths are
/// mask-dependent, so a spec is assembled against a partition and a set of
/// unit orders and is self-contained afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub body: Vec<LayerSpec>,
    pub input_layers: Vec<LayerSpec>,
    pub tasks: Vec<TaskInfo>,
    /// `heads[task_index][level-1]`
    pub heads: Vec<Vec<HeadSpec>>,
    pub norm_widths: Vec<NormWidth>,
}

impl BackboneSpec {
    /// Assembles a spec for hierarchical configurations: one head per
    /// (task, level) sized to the mask's channels at the last body layer.
    pub fn assemble(
        body: Vec<LayerSpec>,
        input_layers: Vec<LayerSpec>,
        tasks: Vec<TaskInfo>,
        partition: &UnitPartition,
        configs: &[VirtualNetConfig],
    ) -> Result<Self> {
        if tasks.len() != configs.len() {
            return Err(Error::InvalidBackbone(format!(
                "{} tasks for {} unit orders",
                tasks.len(),
                configs.len()
            )));
        }
        let mut heads = Vec::with_capacity(tasks.len());
        let mut norm_widths = Vec::new();
        for (task, config) in tasks.iter().zip(configs) {
            let mut task_heads = Vec::with_capacity(config.level_count());
            for l in 1..=config.level_count() {
                let mask = level_mask(partition, config, l)?;
                task_heads.push(HeadSpec {
                    in_features: mask.layers.last().map_or(0, |m| m.outputs.len()),
                    classes: task.class_count,
                });
                collect_norm_widths(
                    &mut norm_widths,
                    &input_layers[task.id.index()],
                    &body,
                    task.id,
                    l,
                    &mask.layers.iter().map(|m| m.inputs.len()).collect::<Vec<_>>(),
                    &mask.layers.iter().map(|m| m.outputs.len()).collect::<Vec<_>>(),
                );
            }
            heads.push(task_heads);
        }
        let spec = BackboneSpec {
            body,
            input_layers,
            tasks,
            heads,
            norm_widths,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Assembles a flat spec: one level per task, full-width masks, one
    /// full-width head per task. The degenerate single-level configuration.
    pub fn assemble_flat(
        body: Vec<LayerSpec>,
        input_layers: Vec<LayerSpec>,
        tasks: Vec<TaskInfo>,
    ) -> Result<Self> {
        let last_out = body
            .last()
            .map(|l| l.out_channels)
            .ok_or_else(|| Error::InvalidBackbone("empty body".into()))?;
        let first_in = body[0].in_channels;
        let mut heads = Vec::with_capacity(tasks.len());
        let mut norm_widths = Vec::new();
        for task in &tasks {
            heads.push(vec![HeadSpec {
                in_features: last_out,
                classes: task.class_count,
            }]);
            let ins: Vec<usize> = body.iter().map(|l| l.in_channels).collect();
            let outs: Vec<usize> = body.iter().map(|l| l.out_channels).collect();
            debug_assert_eq!(ins[0], first_in);
            collect_norm_widths(
                &mut norm_widths,
                &input_layers[task.id.index()],
                &body,
                task.id,
                1,
                &ins,
                &outs,
            );
        }
        let spec = BackboneSpec {
            body,
            input_layers,
            tasks,
            heads,
            norm_widths,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `(input, output)` channel counts per body layer.
    pub fn body_dims(&self) -> Vec<(usize, usize)> {
        self.body
            .iter()
            .map(|l| (l.in_channels, l.out_channels))
            .collect()
    }

    pub fn task_index(&self, task: TaskId) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.id == task)
            .ok_or(Error::UnknownTask(task.0))
    }

    pub fn head(&self, task: TaskId, level: usize) -> Result<HeadSpec> {
        let ti = self.task_index(task)?;
        self.heads[ti]
            .get(level - 1)
            .copied()
            .ok_or(Error::LevelOutOfRange {
                level,
                max: self.heads[ti].len(),
            })
    }

    pub fn norm_width(&self, key: NormKey) -> Option<usize> {
        self.norm_widths
            .iter()
            .find(|w| w.key == key)
            .map(|w| w.channels)
    }

    /// Output shape of the task input layers (identical across tasks).
    pub fn stem_output_shape(&self) -> Result<Vec<usize>> {
        let mut common: Option<Vec<usize>> = None;
        for (task, layer) in self.tasks.iter().zip(&self.input_layers) {
            let out = layer.output_shape(&task.input_shape)?;
            match &common {
                None => common = Some(out),
                Some(c) => {
                    if *c != out {
                        return Err(Error::InvalidBackbone(format!(
                            "task {} input layer yields {:?}, others yield {:?}",
                            task.id, out, c
                        )));
                    }
                }
            }
        }
        common.ok_or_else(|| Error::InvalidBackbone("no tasks".into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.body.is_empty() {
            return Err(Error::InvalidBackbone("empty body".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::InvalidBackbone("no tasks".into()));
        }
        if self.input_layers.len() != self.tasks.len() {
            return Err(Error::InvalidBackbone(
                "every task needs exactly one input layer".into(),
            ));
        }
        if self.heads.len() != self.tasks.len() {
            return Err(Error::InvalidBackbone(
                "every task needs its own head list".into(),
            ));
        }
        for (i, layer) in self.body.iter().enumerate() {
            layer.validate(&format!("body layer {}", i))?;
            if i > 0 && self.body[i - 1].out_channels != layer.in_channels {
                return Err(Error::InvalidBackbone(format!(
                    "body layer {} expects {} channels, layer {} outputs {}",
                    i,
                    layer.in_channels,
                    i - 1,
                    self.body[i - 1].out_channels
                )));
            }
        }
        for (task, layer) in self.tasks.iter().zip(&self.input_layers) {
            layer.validate(&format!("input layer of task {}", task.id))?;
            if layer.out_channels != self.body[0].in_channels {
                return Err(Error::InvalidBackbone(format!(
                    "input layer of task {} outputs {} channels, body expects {}",
                    task.id, layer.out_channels, self.body[0].in_channels
                )));
            }
            if task.id.0 == 0 || task.id.0 > self.tasks.len() {
                return Err(Error::InvalidBackbone(format!(
                    "task ids must be 1..={}, got {}",
                    self.tasks.len(),
                    task.id
                )));
            }
        }
        self.stem_output_shape()?;
        for (task, heads) in self.tasks.iter().zip(&self.heads) {
            if heads.is_empty() {
                return Err(Error::InvalidBackbone(format!(
                    "task {} has no heads",
                    task.id
                )));
            }
            for h in heads {
                if h.classes != task.class_count {
                    return Err(Error::InvalidBackbone(format!(
                        "task {} head classes {} != {}",
                        task.id, h.classes, task.class_count
                    )));
                }
            }
        }
        Ok(())
    }
}

fn collect_norm_widths(
    out: &mut Vec<NormWidth>,
    input_layer: &LayerSpec,
    body: &[LayerSpec],
    task: TaskId,
    level: usize,
    mask_in: &[usize],
    mask_out: &[usize],
) {
    if input_layer.followed_by_norm {
        out.push(NormWidth {
            key: NormKey {
                task,
                level,
                site: NormSite::Input,
            },
            channels: mask_in[0],
        });
    }
    for (r, layer) in body.iter().enumerate() {
        if layer.followed_by_norm {
            out.push(NormWidth {
                key: NormKey {
                    task,
                    level,
                    site: NormSite::Body(r),
                },
                channels: mask_out[r],
            });
        }
    }
}

/// Weight and bias of one layer or head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-(task, level, site) normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormParams {
    fn fresh(channels: usize) -> Self {
        NormParams {
            scale: Tensor::filled(vec![channels], 1.0),
            shift: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Moves the running statistics toward the batch statistics. Keeps
    /// variances strictly positive as long as they start positive.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = RUNNING_STAT_MOMENTUM;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// The complete parameter set: shared body weights, task input layers,
/// per-(task, level) heads, and normalization state.
///
/// Read-only after training and shareable across inference workers;
/// train-mode forwards mutate the normalization statistics and must be
/// serialized per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub body: Vec<LayerParams>,
    pub input: Vec<LayerParams>,
    /// `heads[task_index][level-1]`
    pub heads: Vec<Vec<LayerParams>>,
    pub norms: BTreeMap<NormKey, NormParams>,
}

impl ModelParams {
    pub fn norm(&self, key: NormKey) -> Option<&NormParams> {
        self.norms.get(&key)
    }

    /// Canonical `(name, tensor)` pairs over every trainable tensor, in a
    /// fixed deterministic order. Running statistics are not included; they
    /// are buffers, not parameters.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (r, lp) in self.body.iter().enumerate() {
            out.push((format!("body.{}.weight", r), &lp.weight));
            out.push((format!("body.{}.bias", r), &lp.bias));
        }
        for (t, lp) in self.input.iter().enumerate() {
            out.push((format!("input.{}.weight", t + 1), &lp.weight));
            out.push((format!("input.{}.bias", t + 1), &lp.bias));
        }
        for (t, levels) in self.heads.iter().enumerate() {
            for (l, lp) in levels.iter().enumerate() {
                out.push((format!("head.{}.{}.weight", t + 1, l + 1), &lp.weight));
                out.push((format!("head.{}.{}.bias", t + 1, l + 1), &lp.bias));
            }
        }
        for (key, np) in &self.norms {
            out.push((norm_name(key, "scale"), &np.scale));
            out.push((norm_name(key, "shift"), &np.shift));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (r, lp) in self.body.iter_mut().enumerate() {
            out.push((format!("body.{}.weight", r), &mut lp.weight));
            out.push((format!("body.{}.bias", r), &mut lp.bias));
        }
        for (t, lp) in self.input.iter_mut().enumerate() {
            out.push((format!("input.{}.weight", t + 1), &mut lp.weight));
            out.push((format!("input.{}.bias", t + 1), &mut lp.bias));
        }
        for (t, levels) in self.heads.iter_mut().enumerate() {
            for (l, lp) in levels.iter_mut().enumerate() {
                out.push((format!("head.{}.{}.weight", t + 1, l + 1), &mut lp.weight));
                out.push((format!("head.{}.{}.bias", t + 1, l + 1), &mut lp.bias));
            }
        }
        for (key, np) in &mut self.norms {
            out.push((norm_name(key, "scale"), &mut np.scale));
            out.push((norm_name(key, "shift"), &mut np.shift));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// Squared Euclidean norm over every trainable tensor.
    pub fn squared_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn norm_name(key: &NormKey, field: &str) -> String {
    format!("norm.{}.{}.{}.{}", key.task.0, key.level, key.site, field)
}

pub(crate) fn running_name(key: &NormKey, field: &str) -> String {
    format!("norm.{}.{}.{}.{}", key.task.0, key.level, key.site, field)
}

/// Xavier-uniform initialization: weights uniform in `[-b, b]` with
/// `b = sqrt(6 / (fan_in + fan_out))` taken from the full (unmasked) layer
/// shape; biases zero; normalization scale one, shift zero. Deterministic
/// per seed.
pub fn init_params(spec: &BackboneSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut body = Vec::with_capacity(spec.body.len());
    for layer in &spec.body {
        body.push(init_layer(layer, &mut rng));
    }
    let mut input = Vec::with_capacity(spec.input_layers.len());
    for layer in &spec.input_layers {
        input.push(init_layer(layer, &mut rng));
    }
    let mut heads = Vec::with_capacity(spec.heads.len());
    for task_heads in &spec.heads {
        let mut levels = Vec::with_capacity(task_heads.len());
        for h in task_heads {
            let bound = xavier_bound(h.in_features, h.classes);
            levels.push(LayerParams {
                weight: sample_uniform(vec![h.in_features, h.classes], bound, &mut rng),
                bias: Tensor::zeros(vec![h.classes]),
            });
        }
        heads.push(levels);
    }
    let mut norms = BTreeMap::new();
    for w in &spec.norm_widths {
        norms.insert(w.key, NormParams::fresh(w.channels));
    }
    Ok(ModelParams {
        body,
        input,
        heads,
        norms,
    })
}

fn init_layer(layer: &LayerSpec, rng: &mut ChaCha8Rng) -> LayerParams {
    let (fan_in, fan_out) = match layer.kind {
        LayerKind::Dense => (layer.in_channels, layer.out_channels),
        LayerKind::Conv2d => {
            let k = layer.kernel.expect("validated");
            (layer.in_channels * k * k, layer.out_channels * k * k)
        }
    };
    let bound = xavier_bound(fan_in, fan_out);
    LayerParams {
        weight: sample_uniform(layer.weight_shape(), bound, rng),
        bias: Tensor::zeros(vec![layer.out_channels]),
    }
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn sample_uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/product consistent by construction")
}

/// Desk-scale preset: dense stem into a 24-wide two-layer dense body with
/// relu and no normalization, suitable for exact gradient checks.
pub fn mlp_preset(
    tasks: Vec<TaskInfo>,
    k: usize,
) -> Result<(BackboneSpec, UnitPartition, Vec<VirtualNetConfig>)> {
    const WIDTH: usize = 24;
    let body = vec![
        LayerSpec::dense(WIDTH, WIDTH, false, true),
        LayerSpec::dense(WIDTH, WIDTH, false, true),
    ];
    let input_layers = tasks
        .iter()
        .map(|t| {
            if t.input_shape.len() != 1 {
                return Err(Error::InvalidBackbone(format!(
                    "mlp preset expects flat features, task {} has shape {:?}",
                    t.id, t.input_shape
                )));
            }
            Ok(LayerSpec::dense(t.input_shape[0], WIDTH, false, true))
        })
        .collect::<Result<Vec<_>>>()?;
    let dims: Vec<(usize, usize)> = body.iter().map(|l| (l.in_channels, l.out_channels)).collect();
    let partition = UnitPartition::equal(&dims, k)?;
    let configs = crate::partition::derive_orders(k)?;
    let spec = BackboneSpec::assemble(body, input_layers, tasks, &partition, &configs)?;
    Ok((spec, partition, configs))
}

/// Desk-scale preset: convolutional stem into a body of four 3x3 16-channel
/// convolutions with normalization and relu, for budget and latency runs.
/// Input scales are equalized by picking the stem stride per task.
pub fn conv_preset(
    tasks: Vec<TaskInfo>,
    k: usize,
) -> Result<(BackboneSpec, UnitPartition, Vec<VirtualNetConfig>)> {
    const CHANNELS: usize = 16;
    const KERNEL: usize = 3;
    let body = vec![
        LayerSpec::conv(CHANNELS, CHANNELS, KERNEL, 1, true, true),
        LayerSpec::conv(CHANNELS, CHANNELS, KERNEL, 1, true, true),
        LayerSpec::conv(CHANNELS, CHANNELS, KERNEL, 1, true, true),
        LayerSpec::conv(CHANNELS, CHANNELS, KERNEL, 1, true, true),
    ];
    // smallest input decides the common stem output size at stride 1
    let mut target: Option<usize> = None;
    for t in &tasks {
        if t.input_shape.len() != 3 {
            return Err(Error::InvalidBackbone(format!(
                "conv preset expects [c, h, w] inputs, task {} has {:?}",
                t.id, t.input_shape
            )));
        }
        let h = t.input_shape[1];
        if h != t.input_shape[2] {
            return Err(Error::InvalidBackbone(format!(
                "conv preset expects square inputs, task {} has {:?}",
                t.id, t.input_shape
            )));
        }
        let out = h.checked_sub(KERNEL).map(|d| d + 1).ok_or_else(|| {
            Error::InvalidBackbone(format!("task {} input smaller than kernel", t.id))
        })?;
        target = Some(target.map_or(out, |cur: usize| cur.min(out)));
    }
    let target = target.ok_or_else(|| Error::InvalidBackbone("no tasks".into()))?;
    let input_layers = tasks
        .iter()
        .map(|t| {
            let h = t.input_shape[1];
            let stride = (1..=8)
                .find(|s| (h - KERNEL) % s == 0 && (h - KERNEL) / s + 1 == target)
                .ok_or_else(|| {
                    Error::InvalidBackbone(format!(
                        "no stride maps task {} input {} onto {} stem outputs",
                        t.id, h, target
                    ))
                })?;
            Ok(LayerSpec::conv(
                t.input_shape[0],
                CHANNELS,
                KERNEL,
                stride,
                true,
                true,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let dims: Vec<(usize, usize)> = body.iter().map(|l| (l.in_channels, l.out_channels)).collect();
    let partition = UnitPartition::equal(&dims, k)?;
    let configs = crate::partition::derive_orders(k)?;
    let spec = BackboneSpec::assemble(body, input_layers, tasks, &partition, &configs)?;
    Ok((spec, partition, configs))
}
