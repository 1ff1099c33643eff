//! Units, unit orders, and hierarchy masks.
//!
//! The parameter store of the shared body is cut into `k` disjoint units by
//! splitting every layer's channels into `k` contiguous groups. Each task j
//! gets a virtual network: a permutation of the unit ids whose prefix of
//! length `l` defines the level-`l` sub-network. Orders come from a fixed
//! rule: a task starts from its own unit and repeatedly couples the adjacent
//! (by unit id) not-yet-coupled unit, preferring the lower id when both
//! neighbours are available. Orders are fixed before training and immutable.
//!
//! All values here are immutable after construction and freely shareable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1-based unit identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct UnitId(pub usize);

/// 1-based task identifier. Task i owns unit i as its level-1 structure.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct TaskId(pub usize);

impl TaskId {
    /// 0-based position in task-indexed arrays.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for UnitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Half-open channel interval `[start, end)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ChannelRange {
    pub start: usize,
    pub end: usize,
}

impl ChannelRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.start..self.end
    }
}

/// Per-layer channel groups: `inputs[i]` / `outputs[i]` are the input/output
/// channel intervals owned by unit i+1 in this layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub inputs: Vec<ChannelRange>,
    pub outputs: Vec<ChannelRange>,
}

/// Disjoint channel groups across all body layers, defining the `k` units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitPartition {
    unit_count: usize,
    layers: Vec<LayerGroups>,
}

/// Splits `total` channels into `k` contiguous groups, sizes as equal as
/// possible with remainder channels going one each to the lowest-index units.
pub fn equal_group_sizes(total: usize, k: usize) -> Vec<usize> {
    let base = total / k;
    let rem = total % k;
    (0..k).map(|i| base + usize::from(i < rem)).collect()
}

fn ranges_from_sizes(sizes: &[usize]) -> Vec<ChannelRange> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        out.push(ChannelRange {
            start,
            end: start + s,
        });
        start += s;
    }
    out
}

impl UnitPartition {
    /// Equal split of every body layer into `k` contiguous channel groups.
    /// `layer_dims[r]` is the `(input, output)` channel count of body layer r.
    pub fn equal(layer_dims: &[(usize, usize)], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidPartition("k must be >= 1".into()));
        }
        if layer_dims.is_empty() {
            return Err(Error::InvalidPartition("no body layers".into()));
        }
        for (r, &(ci, co)) in layer_dims.iter().enumerate() {
            if ci < k || co < k {
                return Err(Error::InvalidPartition(format!(
                    "body layer {} has {}x{} channels, fewer than k = {}",
                    r, ci, co, k
                )));
            }
        }
        let layers = layer_dims
            .iter()
            .map(|&(ci, co)| LayerGroups {
                inputs: ranges_from_sizes(&equal_group_sizes(ci, k)),
                outputs: ranges_from_sizes(&equal_group_sizes(co, k)),
            })
            .collect();
        Ok(UnitPartition {
            unit_count: k,
            layers,
        })
    }

    /// Builds a partition from explicit per-layer group sizes.
    /// `input_sizes[r]` / `output_sizes[r]` must each hold `k` entries and sum
    /// to the layer's channel count; output sizes of layer r must equal input
    /// sizes of layer r+1 since they index the same feature maps.
    pub fn from_group_sizes(
        layer_dims: &[(usize, usize)],
        input_sizes: &[Vec<usize>],
        output_sizes: &[Vec<usize>],
    ) -> Result<Self> {
        if input_sizes.len() != layer_dims.len() || output_sizes.len() != layer_dims.len() {
            return Err(Error::InvalidPartition(
                "group size lists must cover every body layer".into(),
            ));
        }
        let k = input_sizes
            .first()
            .map(|v| v.len())
            .ok_or_else(|| Error::InvalidPartition("no body layers".into()))?;
        if k == 0 {
            return Err(Error::InvalidPartition("k must be >= 1".into()));
        }
        let mut layers = Vec::with_capacity(layer_dims.len());
        for (r, &(ci, co)) in layer_dims.iter().enumerate() {
            let ins = &input_sizes[r];
            let outs = &output_sizes[r];
            if ins.len() != k || outs.len() != k {
                return Err(Error::InvalidPartition(format!(
                    "layer {}: expected {} groups",
                    r, k
                )));
            }
            if ins.iter().any(|&s| s == 0) || outs.iter().any(|&s| s == 0) {
                return Err(Error::InvalidPartition(format!(
                    "layer {}: every unit needs at least one channel",
                    r
                )));
            }
            if ins.iter().sum::<usize>() != ci || outs.iter().sum::<usize>() != co {
                return Err(Error::InvalidPartition(format!(
                    "layer {}: group sizes must sum to {}/{}",
                    r, ci, co
                )));
            }
            if r > 0 && input_sizes[r] != output_sizes[r - 1] {
                return Err(Error::InvalidPartition(format!(
                    "layer {}: input groups must match layer {} output groups",
                    r,
                    r - 1
                )));
            }
            layers.push(LayerGroups {
                inputs: ranges_from_sizes(ins),
                outputs: ranges_from_sizes(outs),
            });
        }
        Ok(UnitPartition {
            unit_count: k,
            layers,
        })
    }

    pub fn unit_count(&self) -> usize {
        self.unit_count
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerGroups] {
        &self.layers
    }

    pub fn layer(&self, r: usize) -> &LayerGroups {
        &self.layers[r]
    }

    /// Input channel interval of `unit` in body layer `r`.
    pub fn input_range(&self, r: usize, unit: UnitId) -> ChannelRange {
        self.layers[r].inputs[unit.0 - 1]
    }

    /// Output channel interval of `unit` in body layer `r`.
    pub fn output_range(&self, r: usize, unit: UnitId) -> ChannelRange {
        self.layers[r].outputs[unit.0 - 1]
    }
}

/// A task's virtual network: the order in which units join its hierarchy.
/// `order[l-1]` is the unit added at level l; the number of levels equals the
/// number of units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualNetConfig {
    pub task: TaskId,
    pub order: Vec<UnitId>,
}

impl VirtualNetConfig {
    pub fn level_count(&self) -> usize {
        self.order.len()
    }

    /// Level at which `unit` joins this task's hierarchy (1-based).
    pub fn entry_level(&self, unit: UnitId) -> Option<usize> {
        self.order.iter().position(|&u| u == unit).map(|p| p + 1)
    }

    /// Units present at level `l`: the first `l` entries of the order.
    pub fn units_at_level(&self, l: usize) -> &[UnitId] {
        &self.order[..l]
    }
}

/// Derives the unit order for every task 1..=k:
/// start from the task's own unit, then repeatedly couple the adjacent
/// uncoupled unit, taking the lower-id neighbour when two are adjacent.
pub fn derive_orders(k: usize) -> Result<Vec<VirtualNetConfig>> {
    if k == 0 {
        return Err(Error::InvalidPartition("k must be >= 1".into()));
    }
    let mut configs = Vec::with_capacity(k);
    for j in 1..=k {
        let mut order = Vec::with_capacity(k);
        order.push(UnitId(j));
        let (mut lo, mut hi) = (j, j);
        while order.len() < k {
            if lo > 1 {
                lo -= 1;
                order.push(UnitId(lo));
            } else {
                hi += 1;
                order.push(UnitId(hi));
            }
        }
        configs.push(VirtualNetConfig {
            task: TaskId(j),
            order,
        });
    }
    Ok(configs)
}

/// Level at which unit `i` enters task `j`'s hierarchy.
pub fn entry_level(configs: &[VirtualNetConfig], unit: UnitId, task: TaskId) -> Result<usize> {
    let config = configs
        .iter()
        .find(|c| c.task == task)
        .ok_or(Error::UnknownTask(task.0))?;
    config
        .entry_level(unit)
        .ok_or_else(|| Error::InvalidPartition(format!("unit {} not in order of task {}", unit, task)))
}

/// Per-layer channel index sets selected by a `(task, level)` mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLayerChannels {
    /// Included input channel indices, ascending.
    pub inputs: Vec<usize>,
    /// Included output channel indices, ascending.
    pub outputs: Vec<usize>,
}

/// The sub-network of a task at one level of its hierarchy: the union of the
/// diagonal blocks of the included units plus every interconnection block
/// among them. Masks at consecutive levels are nested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMask {
    pub task: TaskId,
    pub level: usize,
    pub units: Vec<UnitId>,
    pub layers: Vec<MaskLayerChannels>,
}

impl LevelMask {
    pub fn contains_unit(&self, unit: UnitId) -> bool {
        self.units.contains(&unit)
    }
}

fn union_indices(ranges: &[ChannelRange], units: &[UnitId]) -> Vec<usize> {
    let mut idx: Vec<usize> = units
        .iter()
        .flat_map(|u| ranges[u.0 - 1].indices())
        .collect();
    idx.sort_unstable();
    idx
}

/// Mask for the first `l` units of `config`'s order.
pub fn level_mask(
    partition: &UnitPartition,
    config: &VirtualNetConfig,
    l: usize,
) -> Result<LevelMask> {
    let n_h = config.level_count();
    if l == 0 || l > n_h {
        return Err(Error::LevelOutOfRange { level: l, max: n_h });
    }
    let units = config.units_at_level(l).to_vec();
    let layers = partition
        .layers()
        .iter()
        .map(|g| MaskLayerChannels {
            inputs: union_indices(&g.inputs, &units),
            outputs: union_indices(&g.outputs, &units),
        })
        .collect();
    Ok(LevelMask {
        task: config.task,
        level: l,
        units,
        layers,
    })
}

/// Mask covering every unit; the whole body. Used for flat (single-level)
/// configurations where each task sees the full parameter store.
pub fn full_mask(partition: &UnitPartition, task: TaskId, level: usize) -> LevelMask {
    let units: Vec<UnitId> = (1..=partition.unit_count()).map(UnitId).collect();
    let layers = partition
        .layers()
        .iter()
        .map(|g| MaskLayerChannels {
            inputs: union_indices(&g.inputs, &units),
            outputs: union_indices(&g.outputs, &units),
        })
        .collect();
    LevelMask {
        task,
        level,
        units,
        layers,
    }
}

/// Outcome of checking a partition and its unit orders.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<&str> {
        self.violations.first().map(|s| s.as_str())
    }
}

/// Checks disjointness and coverage of the channel groups, permutation
/// validity, the own-unit-first rule, and mask nesting. Violations become
/// report entries rather than errors.
pub fn validate(partition: &UnitPartition, configs: &[VirtualNetConfig]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = partition.unit_count();

    for (r, groups) in partition.layers().iter().enumerate() {
        for (side, ranges) in [("input", &groups.inputs), ("output", &groups.outputs)] {
            if ranges.len() != k {
                report.violations.push(format!(
                    "layer {} {} side: {} groups for {} units",
                    r,
                    side,
                    ranges.len(),
                    k
                ));
                continue;
            }
            let mut cursor = 0;
            for (i, range) in ranges.iter().enumerate() {
                if range.is_empty() {
                    report.violations.push(format!(
                        "layer {} {} side: unit {} has no channels",
                        r,
                        side,
                        i + 1
                    ));
                }
                if range.start != cursor {
                    report.violations.push(format!(
                        "layer {} {} side: groups not disjoint/contiguous at unit {}",
                        r,
                        side,
                        i + 1
                    ));
                }
                cursor = range.end;
            }
        }
    }

    if configs.len() != k {
        report
            .violations
            .push(format!("{} orders for {} units", configs.len(), k));
    }
    for config in configs {
        let n_h = config.level_count();
        if n_h != k {
            report.violations.push(format!(
                "task {}: {} levels, expected the number of units {}",
                config.task, n_h, k
            ));
        }
        let mut seen = vec![false; k + 1];
        let mut permutation = true;
        for &UnitId(u) in &config.order {
            if u == 0 || u > k || seen[u] {
                permutation = false;
                break;
            }
            seen[u] = true;
        }
        if !permutation {
            report
                .violations
                .push(format!("task {}: order is not a permutation", config.task));
            continue;
        }
        if config.order[0].0 != config.task.0 {
            report.violations.push(format!(
                "task {}: rule (i) violated, level 1 holds unit {}",
                config.task, config.order[0]
            ));
        }
        // nesting: prefix masks are subsets by construction; verify anyway
        let mut prev: Option<LevelMask> = None;
        for l in 1..=n_h.min(k) {
            match level_mask(partition, config, l) {
                Ok(mask) => {
                    if let Some(p) = &prev {
                        let nested = p.layers.iter().zip(&mask.layers).all(|(a, b)| {
                            a.inputs.iter().all(|i| b.inputs.contains(i))
                                && a.outputs.iter().all(|o| b.outputs.contains(o))
                        });
                        if !nested {
                            report.violations.push(format!(
                                "task {}: mask at level {} not nested in level {}",
                                config.task,
                                l - 1,
                                l
                            ));
                        }
                    }
                    prev = Some(mask);
                }
                Err(e) => report
                    .violations
                    .push(format!("task {}: level {}: {}", config.task, l, e)),
            }
        }
    }
    report
}

/// How many of the k x n_h loss terms include each unit: unit i appears in
/// task j's terms for levels entry..=n_h, so its count is
/// sum_j (n_h - entry_level(i, j) + 1).
pub fn inclusion_counts(configs: &[VirtualNetConfig]) -> Vec<usize> {
    let k = configs.len();
    let mut counts = vec![0usize; k];
    for config in configs {
        let n_h = config.level_count();
        for (pos, &UnitId(u)) in config.order.iter().enumerate() {
            counts[u - 1] += n_h - pos;
        }
    }
    counts
}
