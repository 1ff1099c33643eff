//! Recording tape for reverse-mode differentiation.
//!
//! Operations are recorded in topological order (a node's inputs always have
//! smaller ids). [`Tape::forward_eval`] computes and caches every node value;
//! [`Tape::backward_eval`] sweeps the nodes in reverse once per call and adds
//! the resulting leaf derivatives into per-parameter accumulators, so repeated
//! backward calls accumulate additively until [`Tape::zero_grads`].
//!
//! The primitive set is exactly what the backbone needs: matmul, valid square
//! convolution (via patch expansion so channel-sliced blocks multiply as
//! contiguous submatrices), bias add, relu, global mean pool, per-channel
//! normalization, softmax cross-entropy, soft-target cross-entropy, block
//! gather, and the scalar glue (sum, scale, squared sum).
//!
//! A tape and its tensors belong to one worker at a time. No internal locking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Normalization epsilon added to variances before the square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    /// Value bound at record time. `param` carries the parameter name used
    /// for gradient extraction; plain inputs have none.
    Leaf { param: Option<String> },
    /// `(m,k) . (k,n) -> (m,n)`
    Matmul,
    /// Valid square convolution, inputs `(x: [b,ci,h,w], w: [kh,kh,ci,co])`.
    Conv2d { stride: usize },
    /// `(x: [b,c] | [b,c,h,w], bias: [c])`, bias broadcast over channels.
    BiasAdd,
    Relu,
    /// `[b,c,h,w] -> [b,c]` spatial mean; `[b,c]` passes through.
    MeanPool,
    /// Per-channel normalization from batch statistics; used in train mode.
    NormBatch,
    /// Per-channel normalization from frozen statistics; used in eval mode.
    NormFrozen { mean: Vec<f64>, var: Vec<f64> },
    /// Mean over the batch of `logsumexp(z) - z[label]`.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// Mean over the batch of `-sum_c q. log softmax(z/T)`; `targets` is a
    /// row-major `[b,c]` matrix of per-sample distributions.
    SoftTargetCrossEntropy { targets: Vec<f64>, temperature: f64 },
    /// Index selection on the trailing axes: `cols` on the last axis, `rows`
    /// on the second-to-last. Gradients scatter back only onto the selected
    /// entries, so everything outside the selection stays exactly zero.
    GatherBlock {
        rows: Option<Vec<usize>>,
        cols: Option<Vec<usize>>,
    },
    /// Elementwise sum of same-shaped inputs.
    AddN,
    Scale { factor: f64 },
    /// `sum(x^2)` as a rank-0 scalar.
    SqSum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd => "bias_add",
            Op::Relu => "relu",
            Op::MeanPool => "mean_pool",
            Op::NormBatch => "channel_norm(batch)",
            Op::NormFrozen { .. } => "channel_norm(frozen)",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SoftTargetCrossEntropy { .. } => "soft_target_cross_entropy",
            Op::GatherBlock { .. } => "gather_block",
            Op::AddN => "add_n",
            Op::Scale { .. } => "scale",
            Op::SqSum => "sq_sum",
        }
    }
}

/// Per-op caches filled during the forward pass for use in backward.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Conv {
        patches: Vec<f64>,
    },
    Softmax {
        probs: Vec<f64>,
    },
    Norm {
        mean: Vec<f64>,
        var: Vec<f64>,
        xhat: Vec<f64>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Option<Tensor>,
    aux: Aux,
    /// Persistent gradient accumulator; parameter leaves only.
    accum: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    evaluated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            debug_assert!(i < self.nodes.len(), "tape inputs must precede the node");
        }
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            inputs,
            value: None,
            aux: Aux::None,
            accum: None,
        });
        self.nodes.len() - 1
    }

    /// Records a non-parameter leaf (minibatch features, constants).
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        let id = self.push(Op::Leaf { param: None }, vec![]);
        self.nodes[id].value = Some(t.clone());
        id
    }

    /// Records a named parameter leaf. The value is copied onto the tape;
    /// gradients are later read back per name.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let id = self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            vec![],
        );
        self.nodes[id].value = Some(t.clone());
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Matmul, vec![a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        self.push(Op::Conv2d { stride }, vec![x, w])
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAdd, vec![x, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn mean_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanPool, vec![x])
    }

    /// Normalization using statistics of the current batch; the computed
    /// per-channel mean/variance are readable afterwards via
    /// [`Tape::norm_batch_stats`].
    pub fn channel_norm_batch(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        self.push(Op::NormBatch, vec![x, scale, shift])
    }

    /// Normalization using frozen running statistics.
    pub fn channel_norm_frozen(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: &[f64],
        var: &[f64],
    ) -> NodeId {
        self.push(
            Op::NormFrozen {
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
            vec![x, scale, shift],
        )
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
        )
    }

    pub fn soft_target_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        temperature: f64,
    ) -> NodeId {
        self.push(
            Op::SoftTargetCrossEntropy {
                targets: targets.to_vec(),
                temperature,
            },
            vec![logits],
        )
    }

    pub fn gather_block(
        &mut self,
        x: NodeId,
        rows: Option<&[usize]>,
        cols: Option<&[usize]>,
    ) -> NodeId {
        self.push(
            Op::GatherBlock {
                rows: rows.map(|r| r.to_vec()),
                cols: cols.map(|c| c.to_vec()),
            },
            vec![x],
        )
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "add_n needs at least one input");
        self.push(Op::AddN, xs.to_vec())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { factor }, vec![x])
    }

    pub fn sq_sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SqSum, vec![x])
    }

    /// Cached value of a node, if the forward pass has run.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].value.as_ref()
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        match self.value(id) {
            Some(t) => t.scalar_value(),
            None => Err(Error::BackwardBeforeForward),
        }
    }

    /// Batch statistics cached by a batch-mode normalization node.
    pub fn norm_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id].aux {
            Aux::Norm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Evaluates every node in recorded order, caching intermediate values,
    /// and returns the terminal (last-recorded) value. Deterministic:
    /// identical inputs produce bitwise-identical outputs.
    pub fn forward_eval(&mut self) -> Result<Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidTensor("empty tape".into()));
        }
        for id in 0..self.nodes.len() {
            self.eval_node(id)?;
        }
        self.evaluated = true;
        Ok(self
            .nodes
            .last()
            .and_then(|n| n.value.clone())
            .expect("terminal value just computed"))
    }

    fn mismatch(&self, id: NodeId, detail: String) -> Error {
        Error::ShapeMismatch {
            node: id,
            op: self.nodes[id].op.name(),
            detail,
        }
    }

    fn input_value(&self, id: NodeId, slot: usize) -> &Tensor {
        let src = self.nodes[id].inputs[slot];
        self.nodes[src]
            .value
            .as_ref()
            .expect("inputs precede node and are already evaluated")
    }

    fn eval_node(&mut self, id: NodeId) -> Result<()> {
        let (value, aux) = match &self.nodes[id].op {
            Op::Leaf { .. } => {
                if self.nodes[id].value.is_none() {
                    return Err(self.mismatch(id, "leaf has no bound value".into()));
                }
                return Ok(());
            }
            Op::Matmul => {
                let a = self.input_value(id, 0);
                let b = self.input_value(id, 1);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.mismatch(
                        id,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                kernels::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
                (Tensor::new(vec![m, n], out)?, Aux::None)
            }
            Op::Conv2d { stride } => {
                let stride = *stride;
                let x = self.input_value(id, 0);
                let w = self.input_value(id, 1);
                if x.rank() != 4 || w.rank() != 4 {
                    return Err(self.mismatch(
                        id,
                        format!("need rank-4 input/weight, got {:?} / {:?}", x.shape(), w.shape()),
                    ));
                }
                let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (kh, kw, wci, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                if kh != kw {
                    return Err(self.mismatch(id, format!("kernel must be square, got {}x{}", kh, kw)));
                }
                if wci != ci {
                    return Err(self.mismatch(
                        id,
                        format!("weight expects {} input channels, activation has {}", wci, ci),
                    ));
                }
                if h < kh || wd < kh || stride == 0 {
                    return Err(self.mismatch(
                        id,
                        format!("spatial {}x{} too small for kernel {} stride {}", h, wd, kh, stride),
                    ));
                }
                let (oh, ow) = kernels::out_dims(h, wd, kh, stride);
                let rows = b * oh * ow;
                let cols = kh * kh * ci;
                let mut patches = vec![0.0; rows * cols];
                kernels::im2col(x.data(), &mut patches, b, ci, h, wd, kh, stride);
                let mut flat = vec![0.0; rows * co];
                kernels::matmul_nn(&patches, w.data(), &mut flat, rows, cols, co);
                // (b*oh*ow, co) -> (b, co, oh, ow)
                let mut out = vec![0.0; b * co * oh * ow];
                for r in 0..rows {
                    let bi = r / (oh * ow);
                    let sp = r % (oh * ow);
                    for c in 0..co {
                        out[(bi * co + c) * oh * ow + sp] = flat[r * co + c];
                    }
                }
                (
                    Tensor::new(vec![b, co, oh, ow], out)?,
                    Aux::Conv { patches },
                )
            }
            Op::BiasAdd => {
                let x = self.input_value(id, 0);
                let bias = self.input_value(id, 1);
                if bias.rank() != 1 {
                    return Err(self.mismatch(id, format!("bias must be rank 1, got {:?}", bias.shape())));
                }
                let c = match x.rank() {
                    2 => x.shape()[1],
                    4 => x.shape()[1],
                    r => return Err(self.mismatch(id, format!("rank {} activation unsupported", r))),
                };
                if bias.len() != c {
                    return Err(self.mismatch(
                        id,
                        format!("bias has {} entries for {} channels", bias.len(), c),
                    ));
                }
                let spatial = x.len() / (x.shape()[0] * c);
                let mut out = x.data().to_vec();
                for b in 0..x.shape()[0] {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        let bv = bias.data()[ch];
                        for s in 0..spatial {
                            out[base + s] += bv;
                        }
                    }
                }
                (Tensor::new(x.shape().to_vec(), out)?, Aux::None)
            }
            Op::Relu => {
                let x = self.input_value(id, 0);
                let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                (Tensor::new(x.shape().to_vec(), out)?, Aux::None)
            }
            Op::MeanPool => {
                let x = self.input_value(id, 0);
                match x.rank() {
                    2 => (x.clone(), Aux::None),
                    4 => {
                        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                        let inv = 1.0 / (h * w) as f64;
                        let mut out = vec![0.0; b * c];
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * h * w;
                                let mut acc = 0.0;
                                for s in 0..h * w {
                                    acc += x.data()[base + s];
                                }
                                out[bi * c + ch] = acc * inv;
                            }
                        }
                        (Tensor::new(vec![b, c], out)?, Aux::None)
                    }
                    r => return Err(self.mismatch(id, format!("rank {} unsupported", r))),
                }
            }
            Op::NormBatch => {
                let x = self.input_value(id, 0);
                let scale = self.input_value(id, 1);
                let shift = self.input_value(id, 2);
                let (shape, c, reduce) = norm_layout(x).map_err(|d| self.mismatch(id, d))?;
                if scale.len() != c || shift.len() != c {
                    return Err(self.mismatch(
                        id,
                        format!("scale/shift sized {}/{} for {} channels", scale.len(), shift.len(), c),
                    ));
                }
                let n = reduce.len() as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for &i in reduce.channel(ch) {
                        acc += x.data()[i];
                    }
                    mean[ch] = acc / n;
                    let mut vacc = 0.0;
                    for &i in reduce.channel(ch) {
                        let d = x.data()[i] - mean[ch];
                        vacc += d * d;
                    }
                    var[ch] = vacc / n;
                }
                let mut xhat = vec![0.0; x.len()];
                let mut out = vec![0.0; x.len()];
                for ch in 0..c {
                    let istd = 1.0 / (var[ch] + NORM_EPS).sqrt();
                    for &i in reduce.channel(ch) {
                        let xh = (x.data()[i] - mean[ch]) * istd;
                        xhat[i] = xh;
                        out[i] = scale.data()[ch] * xh + shift.data()[ch];
                    }
                }
                (Tensor::new(shape, out)?, Aux::Norm { mean, var, xhat })
            }
            Op::NormFrozen { mean, var } => {
                let mean = mean.clone();
                let var = var.clone();
                let x = self.input_value(id, 0);
                let scale = self.input_value(id, 1);
                let shift = self.input_value(id, 2);
                let (shape, c, reduce) = norm_layout(x).map_err(|d| self.mismatch(id, d))?;
                if mean.len() != c || var.len() != c || scale.len() != c || shift.len() != c {
                    return Err(self.mismatch(id, format!("statistics sized for {} channels", c)));
                }
                let mut xhat = vec![0.0; x.len()];
                let mut out = vec![0.0; x.len()];
                for ch in 0..c {
                    let istd = 1.0 / (var[ch] + NORM_EPS).sqrt();
                    for &i in reduce.channel(ch) {
                        let xh = (x.data()[i] - mean[ch]) * istd;
                        xhat[i] = xh;
                        out[i] = scale.data()[ch] * xh + shift.data()[ch];
                    }
                }
                (
                    Tensor::new(shape, out)?,
                    Aux::Norm { mean, var, xhat },
                )
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let labels = labels.clone();
                let logits = self.input_value(id, 0);
                if logits.rank() != 2 {
                    return Err(self.mismatch(id, format!("logits must be rank 2, got {:?}", logits.shape())));
                }
                let (b, c) = (logits.shape()[0], logits.shape()[1]);
                if labels.len() != b {
                    return Err(self.mismatch(id, format!("{} labels for batch {}", labels.len(), b)));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(self.mismatch(id, format!("label {} out of {} classes", bad, c)));
                }
                let mut probs = vec![0.0; b * c];
                let mut loss = 0.0;
                for i in 0..b {
                    let row = &logits.data()[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        probs[i * c + j] = (row[j] - lse).exp();
                    }
                    loss += lse - row[labels[i]];
                }
                (Tensor::scalar(loss / b as f64), Aux::Softmax { probs })
            }
            Op::SoftTargetCrossEntropy { targets, temperature } => {
                let temperature = *temperature;
                let targets = targets.clone();
                let logits = self.input_value(id, 0);
                if logits.rank() != 2 {
                    return Err(self.mismatch(id, format!("logits must be rank 2, got {:?}", logits.shape())));
                }
                let (b, c) = (logits.shape()[0], logits.shape()[1]);
                if targets.len() != b * c {
                    return Err(self.mismatch(
                        id,
                        format!("targets len {} for {}x{} logits", targets.len(), b, c),
                    ));
                }
                if temperature <= 0.0 {
                    return Err(self.mismatch(id, "temperature must be positive".into()));
                }
                let mut probs = vec![0.0; b * c];
                let mut loss = 0.0;
                for i in 0..b {
                    let row = &logits.data()[i * c..(i + 1) * c];
                    let scaled: Vec<f64> = row.iter().map(|&z| z / temperature).collect();
                    let lse = log_sum_exp(&scaled);
                    for j in 0..c {
                        probs[i * c + j] = (scaled[j] - lse).exp();
                        loss += targets[i * c + j] * (lse - scaled[j]);
                    }
                }
                (Tensor::scalar(loss / b as f64), Aux::Softmax { probs })
            }
            Op::GatherBlock { rows, cols } => {
                let rows = rows.clone();
                let cols = cols.clone();
                let x = self.input_value(id, 0);
                let shape = x.shape().to_vec();
                let rank = shape.len();
                if rank == 0 || (rows.is_some() && rank < 2) {
                    return Err(self.mismatch(id, format!("cannot gather on shape {:?}", shape)));
                }
                let last = shape[rank - 1];
                let second = if rank >= 2 { shape[rank - 2] } else { 1 };
                if let Some(c) = &cols {
                    if let Some(&bad) = c.iter().find(|&&i| i >= last) {
                        return Err(self.mismatch(id, format!("column {} out of {}", bad, last)));
                    }
                }
                if let Some(r) = &rows {
                    if let Some(&bad) = r.iter().find(|&&i| i >= second) {
                        return Err(self.mismatch(id, format!("row {} out of {}", bad, second)));
                    }
                }
                let sel_rows: Vec<usize> = match &rows {
                    Some(r) => r.clone(),
                    None => (0..second).collect(),
                };
                let sel_cols: Vec<usize> = match &cols {
                    Some(c) => c.clone(),
                    None => (0..last).collect(),
                };
                let prefix: usize = if rank >= 2 {
                    shape[..rank - 2].iter().product()
                } else {
                    1
                };
                let mut out_shape = shape.clone();
                if rank >= 2 {
                    out_shape[rank - 2] = sel_rows.len();
                }
                out_shape[rank - 1] = sel_cols.len();
                let (nr, nc) = (sel_rows.len(), sel_cols.len());
                let mut out = vec![0.0; prefix * nr * nc];
                if rank == 1 {
                    for (j, &cj) in sel_cols.iter().enumerate() {
                        out[j] = x.data()[cj];
                    }
                } else {
                    for p in 0..prefix {
                        for (i, &ri) in sel_rows.iter().enumerate() {
                            let src = (p * second + ri) * last;
                            let dst = (p * nr + i) * nc;
                            for (j, &cj) in sel_cols.iter().enumerate() {
                                out[dst + j] = x.data()[src + cj];
                            }
                        }
                    }
                }
                (Tensor::new(out_shape, out)?, Aux::None)
            }
            Op::AddN => {
                let first = self.input_value(id, 0).clone();
                let mut out = first.data().to_vec();
                for slot in 1..self.nodes[id].inputs.len() {
                    let t = self.input_value(id, slot);
                    if t.shape() != first.shape() {
                        return Err(self.mismatch(
                            id,
                            format!("shape {:?} != {:?}", t.shape(), first.shape()),
                        ));
                    }
                    for (o, v) in out.iter_mut().zip(t.data()) {
                        *o += v;
                    }
                }
                (Tensor::new(first.shape().to_vec(), out)?, Aux::None)
            }
            Op::Scale { factor } => {
                let factor = *factor;
                let x = self.input_value(id, 0);
                let out: Vec<f64> = x.data().iter().map(|&v| factor * v).collect();
                (Tensor::new(x.shape().to_vec(), out)?, Aux::None)
            }
            Op::SqSum => {
                let x = self.input_value(id, 0);
                let mut acc = 0.0;
                for &v in x.data() {
                    acc += v * v;
                }
                (Tensor::scalar(acc), Aux::None)
            }
        };
        self.nodes[id].value = Some(value);
        self.nodes[id].aux = aux;
        Ok(())
    }

    /// Reverse sweep from the terminal node, which must be scalar. Each call
    /// runs on fresh scratch derivatives and then adds the leaf results into
    /// the persistent parameter accumulators.
    pub fn backward_eval(&mut self) -> Result<()> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let last = self.nodes.len() - 1;
        let terminal = self.nodes[last].value.as_ref().expect("evaluated");
        if terminal.len() != 1 {
            return Err(Error::NonScalarTerminal {
                shape: terminal.shape().to_vec(),
            });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[last] = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = scratch[id].take() else { continue };
            self.backward_node(id, &g, &mut scratch);
            if let Op::Leaf { param: Some(_) } = &self.nodes[id].op {
                let accum = self.nodes[id]
                    .accum
                    .get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, v) in accum.iter_mut().zip(&g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    fn add_into(scratch: &mut [Option<Vec<f64>>], id: NodeId, len: usize, delta: &[f64]) {
        let slot = scratch[id].get_or_insert_with(|| vec![0.0; len]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn backward_node(&self, id: NodeId, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul => {
                let a = self.input_value(id, 0);
                let b = self.input_value(id, 1);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt(g, b.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn(a.data(), g, &mut db, m, k, n);
                Self::add_into(scratch, node.inputs[0], m * k, &da);
                Self::add_into(scratch, node.inputs[1], k * n, &db);
            }
            Op::Conv2d { stride } => {
                let x = self.input_value(id, 0);
                let w = self.input_value(id, 1);
                let y = node.value.as_ref().expect("evaluated");
                let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (kh, co) = (w.shape()[0], w.shape()[3]);
                let (oh, ow) = (y.shape()[2], y.shape()[3]);
                let rows = b * oh * ow;
                let cols = kh * kh * ci;
                let Aux::Conv { patches } = &node.aux else {
                    unreachable!("conv aux cached in forward")
                };
                // (b, co, oh, ow) grad -> (rows, co)
                let mut gflat = vec![0.0; rows * co];
                for r in 0..rows {
                    let bi = r / (oh * ow);
                    let sp = r % (oh * ow);
                    for c in 0..co {
                        gflat[r * co + c] = g[(bi * co + c) * oh * ow + sp];
                    }
                }
                let mut dw = vec![0.0; cols * co];
                kernels::matmul_tn(patches, &gflat, &mut dw, rows, cols, co);
                let mut dpatches = vec![0.0; rows * cols];
                kernels::matmul_nt(&gflat, w.data(), &mut dpatches, rows, co, cols);
                let mut dx = vec![0.0; x.len()];
                kernels::col2im(&dpatches, &mut dx, b, ci, h, wd, kh, *stride);
                Self::add_into(scratch, node.inputs[0], x.len(), &dx);
                Self::add_into(scratch, node.inputs[1], w.len(), &dw);
            }
            Op::BiasAdd => {
                let x = self.input_value(id, 0);
                let bias = self.input_value(id, 1);
                let c = bias.len();
                let spatial = x.len() / (x.shape()[0] * c);
                let mut dbias = vec![0.0; c];
                for b in 0..x.shape()[0] {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            dbias[ch] += g[base + s];
                        }
                    }
                }
                Self::add_into(scratch, node.inputs[0], x.len(), g);
                Self::add_into(scratch, node.inputs[1], c, &dbias);
            }
            Op::Relu => {
                let x = self.input_value(id, 0);
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                Self::add_into(scratch, node.inputs[0], x.len(), &dx);
            }
            Op::MeanPool => {
                let x = self.input_value(id, 0);
                match x.rank() {
                    2 => Self::add_into(scratch, node.inputs[0], x.len(), g),
                    4 => {
                        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                        let inv = 1.0 / (h * w) as f64;
                        let mut dx = vec![0.0; x.len()];
                        for bi in 0..b {
                            for ch in 0..c {
                                let gv = g[bi * c + ch] * inv;
                                let base = (bi * c + ch) * h * w;
                                for s in 0..h * w {
                                    dx[base + s] = gv;
                                }
                            }
                        }
                        Self::add_into(scratch, node.inputs[0], x.len(), &dx);
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Op::NormBatch => {
                let x = self.input_value(id, 0);
                let scale = self.input_value(id, 1);
                let Aux::Norm { mean, var, xhat } = &node.aux else {
                    unreachable!("norm aux cached in forward")
                };
                let (_, c, reduce) = norm_layout(x).expect("validated in forward");
                let n = reduce.len() as f64;
                let mut dx = vec![0.0; x.len()];
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ch in 0..c {
                    let istd = 1.0 / (var[ch] + NORM_EPS).sqrt();
                    let sc = scale.data()[ch];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xm = 0.0;
                    for &i in reduce.channel(ch) {
                        let dxh = g[i] * sc;
                        dscale[ch] += g[i] * xhat[i];
                        dshift[ch] += g[i];
                        sum_dxhat += dxh;
                        sum_dxhat_xm += dxh * (x.data()[i] - mean[ch]);
                    }
                    let dvar = sum_dxhat_xm * (-0.5) * istd * istd * istd;
                    // d/dmean keeps the sum(x - mean) term for exactness
                    let mut sum_xm = 0.0;
                    for &i in reduce.channel(ch) {
                        sum_xm += x.data()[i] - mean[ch];
                    }
                    let dmean = -sum_dxhat * istd + dvar * (-2.0 * sum_xm / n);
                    for &i in reduce.channel(ch) {
                        let dxh = g[i] * sc;
                        dx[i] = dxh * istd
                            + dvar * 2.0 * (x.data()[i] - mean[ch]) / n
                            + dmean / n;
                    }
                }
                Self::add_into(scratch, node.inputs[0], x.len(), &dx);
                Self::add_into(scratch, node.inputs[1], c, &dscale);
                Self::add_into(scratch, node.inputs[2], c, &dshift);
            }
            Op::NormFrozen { var, .. } => {
                let x = self.input_value(id, 0);
                let scale = self.input_value(id, 1);
                let Aux::Norm { xhat, .. } = &node.aux else {
                    unreachable!("norm aux cached in forward")
                };
                let (_, c, reduce) = norm_layout(x).expect("validated in forward");
                let mut dx = vec![0.0; x.len()];
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ch in 0..c {
                    let istd = 1.0 / (var[ch] + NORM_EPS).sqrt();
                    let sc = scale.data()[ch];
                    for &i in reduce.channel(ch) {
                        dx[i] = g[i] * sc * istd;
                        dscale[ch] += g[i] * xhat[i];
                        dshift[ch] += g[i];
                    }
                }
                Self::add_into(scratch, node.inputs[0], x.len(), &dx);
                Self::add_into(scratch, node.inputs[1], c, &dscale);
                Self::add_into(scratch, node.inputs[2], c, &dshift);
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let logits = self.input_value(id, 0);
                let (b, c) = (logits.shape()[0], logits.shape()[1]);
                let Aux::Softmax { probs } = &node.aux else {
                    unreachable!("softmax aux cached in forward")
                };
                let gv = g[0] / b as f64;
                let mut dl = vec![0.0; b * c];
                for i in 0..b {
                    for j in 0..c {
                        let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                        dl[i * c + j] = gv * (probs[i * c + j] - indicator);
                    }
                }
                Self::add_into(scratch, node.inputs[0], b * c, &dl);
            }
            Op::SoftTargetCrossEntropy { targets, temperature } => {
                let logits = self.input_value(id, 0);
                let (b, c) = (logits.shape()[0], logits.shape()[1]);
                let Aux::Softmax { probs } = &node.aux else {
                    unreachable!("softmax aux cached in forward")
                };
                let gv = g[0] / (b as f64 * temperature);
                let mut dl = vec![0.0; b * c];
                for i in 0..b * c {
                    dl[i] = gv * (probs[i] - targets[i]);
                }
                Self::add_into(scratch, node.inputs[0], b * c, &dl);
            }
            Op::GatherBlock { rows, cols } => {
                let x = self.input_value(id, 0);
                let shape = x.shape();
                let rank = shape.len();
                let last = shape[rank - 1];
                let second = if rank >= 2 { shape[rank - 2] } else { 1 };
                let sel_rows: Vec<usize> = match rows {
                    Some(r) => r.clone(),
                    None => (0..second).collect(),
                };
                let sel_cols: Vec<usize> = match cols {
                    Some(c) => c.clone(),
                    None => (0..last).collect(),
                };
                let prefix: usize = if rank >= 2 {
                    shape[..rank - 2].iter().product()
                } else {
                    1
                };
                let (nr, nc) = (sel_rows.len(), sel_cols.len());
                let mut dx = vec![0.0; x.len()];
                if rank == 1 {
                    for (j, &cj) in sel_cols.iter().enumerate() {
                        dx[cj] += g[j];
                    }
                } else {
                    for p in 0..prefix {
                        for (i, &ri) in sel_rows.iter().enumerate() {
                            let dst = (p * second + ri) * last;
                            let src = (p * nr + i) * nc;
                            for (j, &cj) in sel_cols.iter().enumerate() {
                                dx[dst + cj] += g[src + j];
                            }
                        }
                    }
                }
                Self::add_into(scratch, node.inputs[0], x.len(), &dx);
            }
            Op::AddN => {
                for &src in &node.inputs {
                    Self::add_into(scratch, src, g.len(), g);
                }
            }
            Op::Scale { factor } => {
                let scaled: Vec<f64> = g.iter().map(|&v| factor * v).collect();
                Self::add_into(scratch, node.inputs[0], g.len(), &scaled);
            }
            Op::SqSum => {
                let x = self.input_value(id, 0);
                let dx: Vec<f64> = x.data().iter().map(|&v| 2.0 * v * g[0]).collect();
                Self::add_into(scratch, node.inputs[0], x.len(), &dx);
            }
        }
    }

    /// Accumulated gradient of a parameter leaf by name. Zeros if the leaf
    /// was disconnected from the terminal.
    pub fn grad_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.nodes.iter().find_map(|n| match &n.op {
            Op::Leaf { param: Some(p) } if p == name => Some(
                n.accum
                    .clone()
                    .unwrap_or_else(|| vec![0.0; n.value.as_ref().map_or(0, |v| v.len())]),
            ),
            _ => None,
        })
    }

    /// All parameter gradients keyed by name (zeros for disconnected leaves).
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            if let Op::Leaf { param: Some(p) } = &n.op {
                let g = n
                    .accum
                    .clone()
                    .unwrap_or_else(|| vec![0.0; n.value.as_ref().map_or(0, |v| v.len())]);
                out.insert(p.clone(), g);
            }
        }
        out
    }

    /// Clears the persistent parameter accumulators.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.accum = None;
        }
    }

    /// Smallest |x| feeding any relu, after a forward pass. Finite-difference
    /// checks are only valid when this margin comfortably exceeds the probe
    /// step, since relu is not differentiable at zero.
    pub fn relu_input_min_abs(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu = node.op {
                let src = &self.nodes[node.inputs[0]];
                if let Some(v) = &src.value {
                    for &x in v.data() {
                        let a = x.abs();
                        min = Some(min.map_or(a, |m: f64| m.min(a)));
                    }
                }
            }
        }
        min
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln()
}

/// Index layout for per-channel reductions over `(batch, c)` or
/// `(batch, c, h, w)` activations.
struct NormReduce {
    batch: usize,
    spatial: usize,
    indices: Vec<Vec<usize>>,
}

impl NormReduce {
    fn len(&self) -> usize {
        self.batch * self.spatial
    }

    fn channel(&self, ch: usize) -> &[usize] {
        &self.indices[ch]
    }
}

fn norm_layout(x: &Tensor) -> std::result::Result<(Vec<usize>, usize, NormReduce), String> {
    let (batch, channels, spatial) = match x.rank() {
        2 => (x.shape()[0], x.shape()[1], 1),
        4 => (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]),
        r => return Err(format!("rank {} unsupported for channel norm", r)),
    };
    let mut indices = vec![Vec::with_capacity(batch * spatial); channels];
    for b in 0..batch {
        for ch in 0..channels {
            let base = (b * channels + ch) * spatial;
            for s in 0..spatial {
                indices[ch].push(base + s);
            }
        }
    }
    Ok((
        x.shape().to_vec(),
        channels,
        NormReduce {
            batch,
            spatial,
            indices,
        },
    ))
}
