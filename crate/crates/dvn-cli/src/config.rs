//! The run configuration: one JSON document embedding the backbone choice,
//! partition parameters, training hyperparameters, and the scenario. Flags
//! only override scalar fields (seed, epochs, output dir).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use dvn_core::backbone::{BackboneSpec, LayerSpec, TaskInfo};
use dvn_core::data::{self, Dataset};
use dvn_core::partition::{derive_orders, TaskId, UnitPartition, VirtualNetConfig};
use dvn_core::trainer::{natural_order_config, TaskBundle, TaskData, TrainConfig};

use crate::ConfigError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneDef {
    /// `{"preset": "mlp"}` or `{"preset": "conv"}`.
    Preset { preset: String },
    /// Explicit body and per-task input layers; heads are derived from the
    /// partition and the tasks' class counts.
    Explicit {
        body: Vec<LayerSpec>,
        input_layers: Vec<LayerSpec>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionDef {
    pub k: usize,
    /// Explicit per-layer group sizes; equal split when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_sizes: Option<GroupSizes>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupSizes {
    pub inputs: Vec<Vec<usize>>,
    pub outputs: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Joint,
    Sequential,
    Single,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskRef {
    pub id: usize,
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: Mode,
    pub tasks: Vec<TaskRef>,
    /// Sequential mode: number of old tasks trained in phase one. Must equal
    /// `tasks - 1` (one new task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_boundary: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneDef,
    pub partition: PartitionDef,
    #[serde(default)]
    pub train: TrainConfig,
    pub scenario: Scenario,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow!(ConfigError(format!("config {}: {}", path.display(), e))))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.partition.k == 0 {
            return Err(anyhow!(ConfigError("k must be >= 1".into())));
        }
        if self.scenario.tasks.is_empty() {
            return Err(anyhow!(ConfigError("scenario has no tasks".into())));
        }
        for (i, t) in self.scenario.tasks.iter().enumerate() {
            if t.id != i + 1 {
                return Err(anyhow!(ConfigError(format!(
                    "task ids must be 1..=k in order; position {} has id {}",
                    i, t.id
                ))));
            }
        }
        match self.scenario.mode {
            Mode::Single => {
                if self.scenario.tasks.len() != 1 {
                    return Err(anyhow!(ConfigError(
                        "single mode takes exactly one task".into()
                    )));
                }
            }
            Mode::Joint => {
                if self.scenario.tasks.len() != self.partition.k {
                    return Err(anyhow!(ConfigError(format!(
                        "joint mode: {} tasks but k = {}",
                        self.scenario.tasks.len(),
                        self.partition.k
                    ))));
                }
            }
            Mode::Sequential => {
                let k = self.scenario.tasks.len();
                if k != self.partition.k || k < 2 {
                    return Err(anyhow!(ConfigError(format!(
                        "sequential mode: {} tasks but k = {}",
                        k, self.partition.k
                    ))));
                }
                let boundary = self.scenario.phase_boundary.unwrap_or(k - 1);
                if boundary != k - 1 {
                    return Err(anyhow!(ConfigError(format!(
                        "sequential mode supports exactly one new task: phase_boundary must be {}",
                        k - 1
                    ))));
                }
            }
        }
        self.train
            .validate()
            .map_err(|e| anyhow!(ConfigError(e.to_string())))?;
        Ok(())
    }

    /// Loads every referenced dataset, relative paths resolved against the
    /// config file's directory.
    pub fn load_bundle(&self, config_dir: &Path) -> Result<TaskBundle> {
        let mut tasks = Vec::new();
        for t in &self.scenario.tasks {
            let train = load_dataset(config_dir, &t.train)?;
            let test = load_dataset(config_dir, &t.test)?;
            tasks.push(TaskData {
                task: TaskId(t.id),
                train,
                test,
            });
        }
        let bundle = TaskBundle { tasks };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Unit orders for the scenario: derived for joint/sequential, the
    /// natural order for single-task mode.
    pub fn unit_orders(&self, partition: &UnitPartition) -> Result<Vec<VirtualNetConfig>> {
        Ok(match self.scenario.mode {
            Mode::Single => vec![natural_order_config(partition, TaskId(1))],
            _ => derive_orders(self.partition.k)?,
        })
    }

    /// Materializes the backbone, partition, and unit orders for the loaded
    /// datasets.
    pub fn assemble(
        &self,
        bundle: &TaskBundle,
    ) -> Result<(BackboneSpec, UnitPartition, Vec<VirtualNetConfig>)> {
        let task_infos: Vec<TaskInfo> = bundle
            .tasks
            .iter()
            .map(|t| TaskInfo {
                id: t.task,
                class_count: t.train.class_count,
                input_shape: t.train.feature_shape.clone(),
            })
            .collect();
        match &self.backbone {
            BackboneDef::Preset { preset } => match preset.as_str() {
                "mlp" => {
                    let (spec, partition, derived) =
                        dvn_core::backbone::mlp_preset(task_infos, self.partition.k)?;
                    let (partition, configs) = self.override_partition(&spec, partition, derived)?;
                    let spec = self.reassemble_if_custom(spec, &partition, &configs)?;
                    Ok((spec, partition, configs))
                }
                "conv" => {
                    let (spec, partition, derived) =
                        dvn_core::backbone::conv_preset(task_infos, self.partition.k)?;
                    let (partition, configs) = self.override_partition(&spec, partition, derived)?;
                    let spec = self.reassemble_if_custom(spec, &partition, &configs)?;
                    Ok((spec, partition, configs))
                }
                other => Err(anyhow!(ConfigError(format!(
                    "unknown preset {:?} (expected \"mlp\" or \"conv\")",
                    other
                )))),
            },
            BackboneDef::Explicit { body, input_layers } => {
                let dims: Vec<(usize, usize)> = body
                    .iter()
                    .map(|l| (l.in_channels, l.out_channels))
                    .collect();
                let partition = self.build_partition(&dims)?;
                let configs = self.unit_orders(&partition)?;
                let spec = BackboneSpec::assemble(
                    body.clone(),
                    input_layers.clone(),
                    task_infos,
                    &partition,
                    &configs,
                )?;
                Ok((spec, partition, configs))
            }
        }
    }

    fn build_partition(&self, dims: &[(usize, usize)]) -> Result<UnitPartition> {
        Ok(match &self.partition.group_sizes {
            Some(gs) => UnitPartition::from_group_sizes(dims, &gs.inputs, &gs.outputs)?,
            None => UnitPartition::equal(dims, self.partition.k)?,
        })
    }

    /// Presets build an equal partition with derived orders; replace both if
    /// the config asks for explicit group sizes or single-task mode.
    fn override_partition(
        &self,
        spec: &BackboneSpec,
        default_partition: UnitPartition,
        default_configs: Vec<VirtualNetConfig>,
    ) -> Result<(UnitPartition, Vec<VirtualNetConfig>)> {
        let partition = match &self.partition.group_sizes {
            Some(_) => self.build_partition(&spec.body_dims())?,
            None => default_partition,
        };
        let configs = match self.scenario.mode {
            Mode::Single => vec![natural_order_config(&partition, TaskId(1))],
            _ => default_configs,
        };
        Ok((partition, configs))
    }

    /// Preset specs are assembled against the derived orders; rebuild heads
    /// when the partition or orders were overridden.
    fn reassemble_if_custom(
        &self,
        spec: BackboneSpec,
        partition: &UnitPartition,
        configs: &[VirtualNetConfig],
    ) -> Result<BackboneSpec> {
        if self.partition.group_sizes.is_none() && self.scenario.mode != Mode::Single {
            return Ok(spec);
        }
        Ok(BackboneSpec::assemble(
            spec.body,
            spec.input_layers,
            spec.tasks,
            partition,
            configs,
        )?)
    }
}

fn load_dataset(config_dir: &Path, path: &Path) -> Result<Dataset> {
    let resolved = if path.is_absolute() {
        path.to_path_buf()
    } else {
        config_dir.join(path)
    };
    data::load(&resolved).with_context(|| format!("loading dataset {}", resolved.display()))
}

/// Per-(task, level) accuracy map for the summary JSON, with stable ordering.
pub fn accuracy_map(entries: &[dvn_core::trainer::AccuracyEntry]) -> BTreeMap<String, f64> {
    entries
        .iter()
        .map(|e| (format!("task{}.level{}", e.task.0, e.level), e.accuracy))
        .collect()
}
