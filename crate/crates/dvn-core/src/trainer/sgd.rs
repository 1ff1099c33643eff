//! SGD with Nesterov momentum over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelParams;
use crate::error::{Error, Result};

/// Training hyperparameters. The learning-rate schedule is piecewise
/// constant: `(epoch, rate)` pairs, each rate applying from its epoch until
/// the next entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Distillation temperature for sequential runs.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: vec![(0, 0.1)],
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 10,
            temperature: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidConfig("empty learning-rate schedule".into()));
        }
        if self.schedule[0].0 != 0 {
            return Err(Error::InvalidConfig(
                "schedule must start at epoch 0".into(),
            ));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidConfig(
                "schedule epochs must be strictly increasing".into(),
            ));
        }
        if self.schedule.iter().any(|&(_, r)| r <= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Rate in effect at `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .last()
            .map(|&(_, r)| r)
            .unwrap_or(self.schedule[0].1)
    }
}

/// Per-tensor momentum buffers, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }
}

/// One Nesterov step over every parameter tensor, consuming the gradients
/// accumulated in the tensors' grad slots:
///
/// `v <- mu v + g;  w <- w - lr (g + mu v)`
///
/// Weight decay is not applied here; it already arrived as part of the
/// gradient. With zero momentum this is the plain step `w <- w - lr g`.
pub fn sgd_step(
    params: &mut ModelParams,
    state: &mut SgdState,
    config: &TrainConfig,
    epoch: usize,
) {
    let lr = config.rate_at(epoch);
    let mu = config.momentum;
    for (name, tensor) in params.named_tensors_mut() {
        let g = tensor.grad_or_zeros();
        let v = state
            .velocity
            .entry(name)
            .or_insert_with(|| vec![0.0; g.len()]);
        let data = tensor.data_mut();
        for i in 0..g.len() {
            v[i] = mu * v[i] + g[i];
            data[i] -= lr * (g[i] + mu * v[i]);
        }
    }
}
