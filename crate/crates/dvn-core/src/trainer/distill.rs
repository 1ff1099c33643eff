//! Recorded soft targets for sequential training.
//!
//! After the old tasks are trained, the frozen network's logits on the new
//! task's inputs are softened at temperature T and stored once, per (old
//! task, level). Phase two then matches the current network's softened
//! outputs against these records instead of the unavailable old data.

use std::collections::BTreeMap;

use crate::backbone::{eval_logits, BackboneSpec, ModelParams};
use crate::error::{Error, Result};
use crate::partition::{level_mask, TaskId, UnitPartition, VirtualNetConfig};
use crate::tensor::Tensor;

const TARGET_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
struct TargetMatrix {
    classes: usize,
    samples: usize,
    /// Row-major `samples x classes`; each row is a distribution.
    data: Vec<f64>,
}

/// Immutable soft targets per (old task, level), aligned with the new task's
/// sample indices.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    temperature: f64,
    entries: BTreeMap<(TaskId, usize), TargetMatrix>,
}

impl DistillTargets {
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Builds a table for one (task, level) from precomputed rows; rows are
    /// row-major `samples x classes` and each must be a distribution.
    pub fn from_rows(
        task: TaskId,
        level: usize,
        samples: usize,
        classes: usize,
        data: Vec<f64>,
        temperature: f64,
    ) -> Self {
        assert_eq!(data.len(), samples * classes);
        let mut entries = BTreeMap::new();
        entries.insert((task, level), TargetMatrix {
            classes,
            samples,
            data,
        });
        DistillTargets {
            temperature,
            entries,
        }
    }

    /// Recorded distribution for one sample.
    pub fn row(&self, task: TaskId, level: usize, sample: usize) -> Result<&[f64]> {
        let m = self
            .entries
            .get(&(task, level))
            .ok_or(Error::MissingTargets {
                task: task.0,
                level,
                index: sample,
            })?;
        if sample >= m.samples {
            return Err(Error::MissingTargets {
                task: task.0,
                level,
                index: sample,
            });
        }
        Ok(&m.data[sample * m.classes..(sample + 1) * m.classes])
    }

    /// Rows for a minibatch, concatenated in index order.
    pub fn rows(&self, task: TaskId, level: usize, indices: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &i in indices {
            out.extend_from_slice(self.row(task, level, i)?);
        }
        Ok(out)
    }

    pub fn classes(&self, task: TaskId, level: usize) -> Option<usize> {
        self.entries.get(&(task, level)).map(|m| m.classes)
    }
}

fn softened_rows(logits: &Tensor, temperature: f64) -> Vec<f64> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let row = &logits.data()[i * c..(i + 1) * c];
        let scaled: Vec<f64> = row.iter().map(|&z| z / temperature).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scaled.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = (scaled[j] - lse).exp();
        }
    }
    out
}

/// Computes soft targets `q = softmax(z_old / T)` for every old task and
/// level, where `z_old` are the frozen network's eval-mode logits on the new
/// inputs. Every old task must accept the new task's input shape.
pub fn distill_targets(
    old_params: &ModelParams,
    spec: &BackboneSpec,
    partition: &UnitPartition,
    old_configs: &[VirtualNetConfig],
    new_features: &Tensor,
    temperature: f64,
) -> Result<DistillTargets> {
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if new_features.rank() < 2 {
        return Err(Error::InvalidConfig(
            "features must be batched (leading sample dim)".into(),
        ));
    }
    let samples = new_features.shape()[0];
    let per_sample = &new_features.shape()[1..];
    let mut entries = BTreeMap::new();
    for config in old_configs {
        let ti = spec.task_index(config.task)?;
        if spec.tasks[ti].input_shape != per_sample {
            return Err(Error::InvalidConfig(format!(
                "task {} expects input shape {:?}, new data has {:?}",
                config.task, spec.tasks[ti].input_shape, per_sample
            )));
        }
        for level in 1..=config.level_count() {
            let mask = level_mask(partition, config, level)?;
            let classes = spec.head(config.task, level)?.classes;
            let mut data = Vec::with_capacity(samples * classes);
            let mut start = 0;
            while start < samples {
                let end = (start + TARGET_BATCH).min(samples);
                let batch = slice_batch(new_features, start, end)?;
                let logits = eval_logits(old_params, spec, &mask, &batch)?;
                data.extend(softened_rows(&logits, temperature));
                start = end;
            }
            entries.insert(
                (config.task, level),
                TargetMatrix {
                    classes,
                    samples,
                    data,
                },
            );
        }
    }
    Ok(DistillTargets {
        temperature,
        entries,
    })
}

fn slice_batch(features: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let per = features.len() / features.shape()[0];
    let mut shape = features.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, features.data()[start * per..end * per].to_vec())
}

/// Frozen copy of the trained parameters plus the recorded soft targets.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub params: ModelParams,
    pub targets: DistillTargets,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_soften_to_uniform() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let q = softened_rows(&logits, 1.0);
        assert!((q[0] - 0.5).abs() < 1e-15);
        assert!((q[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn high_temperature_flattens_any_logits() {
        let logits = Tensor::new(vec![1, 4], vec![3.0, -1.0, 0.5, 7.0]).unwrap();
        let q = softened_rows(&logits, 1e6);
        for v in &q {
            assert!((v - 0.25).abs() <= 1e-5);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.3, 4.0, 4.0, -1.0]).unwrap();
        let q = softened_rows(&logits, 2.0);
        for i in 0..2 {
            let s: f64 = q[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
