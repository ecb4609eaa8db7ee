//! Stage-to-device assignments and their expected-load cost model.
//!
//! Device `j` carries the expected per-frame load `a_j = Σ L(s)·R(s)` over its
//! stages, and every hierarchy edge whose endpoints sit on different devices
//! adds `transfer(child)·R(child)` to the expected communication cost `b`.
//! A partition scores `T = F / ((F + N - 1)·max(a_j) + F·b)`, with `N` the
//! number of devices that hold at least one stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, StageId, UsageRates};
use crate::model::{pipeline_throughput, Frames};

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("partition assigns {got} stages, hierarchy has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("stage {stage} assigned to device {device}, only {device_count} devices exist")]
    DeviceOutOfRange {
        stage: usize,
        device: usize,
        device_count: usize,
    },
    #[error("stage {0} is not assigned to any device")]
    Unassigned(usize),
    #[error("stage {0} is assigned to more than one device")]
    AssignedTwice(usize),
    #[error("device count must be at least 1")]
    NoDevices,
    #[error("frame count must be at least 1")]
    ZeroFrames,
    #[error("all device loads are zero")]
    AllZeroLoads,
    #[error("search incomplete: {partitions} partitions exceed the evaluation budget of {budget}")]
    SearchIncomplete { partitions: u128, budget: u64 },
}

/// Assignment of every stage to one of `device_count` interchangeable devices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition {
    assignment: Vec<usize>,
    device_count: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, device_count: usize) -> Result<Self, PartitionError> {
        if device_count == 0 {
            return Err(PartitionError::NoDevices);
        }
        if let Some((stage, &device)) = assignment
            .iter()
            .enumerate()
            .find(|(_, &d)| d >= device_count)
        {
            return Err(PartitionError::DeviceOutOfRange {
                stage,
                device,
                device_count,
            });
        }
        Ok(Partition {
            assignment,
            device_count,
        })
    }

    /// Everything on device 0.
    pub fn single(stage_count: usize, device_count: usize) -> Self {
        Partition {
            assignment: vec![0; stage_count],
            device_count: device_count.max(1),
        }
    }

    /// Build from per-device stage lists; every stage must appear exactly once.
    pub fn from_groups(
        groups: &[Vec<StageId>],
        stage_count: usize,
        device_count: usize,
    ) -> Result<Self, PartitionError> {
        if groups.len() > device_count {
            return Err(PartitionError::DeviceOutOfRange {
                stage: groups[device_count].first().map_or(0, |s| s.index()),
                device: device_count,
                device_count,
            });
        }
        let mut assignment = vec![usize::MAX; stage_count];
        for (device, group) in groups.iter().enumerate() {
            for s in group {
                let slot = assignment
                    .get_mut(s.index())
                    .ok_or(PartitionError::LengthMismatch {
                        expected: stage_count,
                        got: s.index() + 1,
                    })?;
                if *slot != usize::MAX {
                    return Err(PartitionError::AssignedTwice(s.index()));
                }
                *slot = device;
            }
        }
        if let Some(stage) = assignment.iter().position(|&d| d == usize::MAX) {
            return Err(PartitionError::Unassigned(stage));
        }
        Partition::new(assignment, device_count)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn device_count(&self) -> usize {
        self.device_count
    }

    pub fn device_of(&self, stage: StageId) -> usize {
        self.assignment[stage.index()]
    }

    pub fn stages_on(&self, device: usize) -> impl Iterator<Item = StageId> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &d)| d == device)
            .map(|(i, _)| StageId(i as u16))
    }

    /// Stage lists for devices `0..device_count`; unused devices get empty lists.
    pub fn groups(&self) -> Vec<Vec<StageId>> {
        let mut groups = vec![Vec::new(); self.device_count];
        for (i, &d) in self.assignment.iter().enumerate() {
            groups[d].push(StageId(i as u16));
        }
        groups
    }

    /// Devices holding at least one stage.
    pub fn devices_used(&self) -> usize {
        let mut seen = vec![false; self.device_count];
        self.assignment.iter().for_each(|&d| seen[d] = true);
        seen.into_iter().filter(|&b| b).count()
    }

    /// Relabel devices in order of first appearance by stage id, so that
    /// partitions equal up to relabeling compare equal.
    pub fn canonical(&self) -> Partition {
        Partition {
            assignment: canonical_labels(&self.assignment),
            device_count: self.device_count,
        }
    }

    pub fn is_canonical(&self) -> bool {
        canonical_labels(&self.assignment) == self.assignment
    }
}

fn canonical_labels(assignment: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = Vec::new();
    let mut next = 0;
    assignment
        .iter()
        .map(|&d| {
            if d >= map.len() {
                map.resize(d + 1, None);
            }
            *map[d].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Cost-model aggregates of one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionEval {
    /// `a_j` for every device index, zero for unused devices.
    pub device_loads: Vec<f64>,
    pub max_load: f64,
    /// Expected per-frame communication `b`.
    pub comm_cost: f64,
    /// `(parent, child)` edges spanning devices, ordered by child id.
    pub cut_edges: Vec<(StageId, StageId)>,
    pub devices_used: usize,
    pub frames: Frames,
    pub estimated_throughput: f64,
    /// Most loaded over least loaded nonzero device.
    pub imbalance: f64,
}

/// Score a partition under the expected-load and edge-cut model.
pub fn evaluate_partition(
    hierarchy: &Hierarchy,
    rates: &UsageRates,
    partition: &Partition,
    frames: Frames,
) -> Result<PartitionEval, PartitionError> {
    if partition.assignment.len() != hierarchy.len() {
        return Err(PartitionError::LengthMismatch {
            expected: hierarchy.len(),
            got: partition.assignment.len(),
        });
    }
    if frames == Frames::Finite(0) {
        return Err(PartitionError::ZeroFrames);
    }

    let mut device_loads = vec![0.0; partition.device_count];
    for s in hierarchy.stages() {
        device_loads[partition.device_of(s.id)] += s.latency_s * rates.get(s.id);
    }
    let mut comm_cost = 0.0;
    let mut cut_edges = Vec::new();
    for s in hierarchy.stages().iter().skip(1) {
        let parent = hierarchy.parent(s.id).expect("non-root stage has a parent");
        if partition.device_of(parent) != partition.device_of(s.id) {
            comm_cost += s.transfer_s * rates.get(s.id);
            cut_edges.push((parent, s.id));
        }
    }

    let max_load = device_loads.iter().copied().fold(0.0, f64::max);
    let devices_used = partition.devices_used();
    let imbalance = imbalance_of(&device_loads)?;
    Ok(PartitionEval {
        estimated_throughput: pipeline_throughput(max_load, comm_cost, devices_used, frames),
        device_loads,
        max_load,
        comm_cost,
        cut_edges,
        devices_used,
        frames,
        imbalance,
    })
}

fn imbalance_of(loads: &[f64]) -> Result<f64, PartitionError> {
    let max = loads.iter().copied().fold(0.0, f64::max);
    let min = loads
        .iter()
        .copied()
        .filter(|&l| l > 0.0)
        .fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return Err(PartitionError::AllZeroLoads);
    }
    Ok(max / min)
}

/// Ratio of the most to the least loaded device, ignoring idle devices.
pub fn workload_imbalance(eval: &PartitionEval) -> Result<f64, PartitionError> {
    imbalance_of(&eval.device_loads)
}

/// Streams every partition of `stage_count` stages into at most `max_devices`
/// unlabeled groups, each exactly once, as canonical restricted growth strings
/// in lexicographic order.
#[derive(Clone, Debug)]
pub struct SetPartitions {
    current: Vec<usize>,
    /// `prefix_max[i]` is `max(current[..i]) + 1`, i.e. the groups opened before `i`.
    prefix_max: Vec<usize>,
    max_devices: usize,
    done: bool,
}

impl SetPartitions {
    pub fn new(stage_count: usize, max_devices: usize) -> Self {
        SetPartitions {
            current: vec![0; stage_count],
            prefix_max: vec![if stage_count == 0 { 0 } else { 1 }; stage_count],
            max_devices: max_devices.max(1),
            done: false,
        }
    }

    fn advance(&mut self) -> bool {
        let n = self.current.len();
        // Rightmost position that can still grow; position 0 is pinned to group 0.
        for i in (1..n).rev() {
            let limit = self.prefix_max[i].min(self.max_devices - 1);
            if self.current[i] < limit {
                self.current[i] += 1;
                let mut open = self.prefix_max[i].max(self.current[i] + 1);
                for j in i + 1..n {
                    self.current[j] = 0;
                    self.prefix_max[j] = open;
                    open = open.max(1);
                }
                return true;
            }
        }
        false
    }
}

impl Iterator for SetPartitions {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        if !self.advance() {
            self.done = true;
        }
        Some(out)
    }
}

/// Stream every canonical partition of the hierarchy's stages over at most `devices` devices.
pub fn enumerate_partitions(stage_count: usize, devices: usize) -> impl Iterator<Item = Partition> {
    let device_count = devices.max(1);
    SetPartitions::new(stage_count, device_count).map(move |assignment| Partition {
        assignment,
        device_count,
    })
}

/// `Σ_{k=1..devices} S(n, k)`, saturating.
pub fn partition_count(stage_count: usize, devices: usize) -> u128 {
    if stage_count == 0 {
        return 1;
    }
    let kmax = devices.min(stage_count);
    // row[k] = S(m, k) for the current m
    let mut row = vec![0u128; kmax + 1];
    row[0] = 1;
    for _ in 0..stage_count {
        for k in (1..=kmax).rev() {
            row[k] = row[k - 1].saturating_add((k as u128).saturating_mul(row[k]));
        }
        row[0] = 0;
    }
    row[1..].iter().fold(0u128, |a, &b| a.saturating_add(b))
}

/// JSON layout of a selected partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionDocument {
    pub devices: Vec<Vec<u16>>,
    pub eval: EvalDocument,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub loads_s: Vec<f64>,
    pub comm_s: f64,
    pub throughput_fps: f64,
    pub imbalance: f64,
    pub cut_edges: Vec<[u16; 2]>,
}

impl PartitionDocument {
    pub fn new(partition: &Partition, eval: &PartitionEval) -> Self {
        PartitionDocument {
            devices: partition
                .groups()
                .into_iter()
                .map(|g| g.into_iter().map(|s| s.0).collect())
                .collect(),
            eval: EvalDocument {
                loads_s: eval.device_loads.clone(),
                comm_s: eval.comm_cost,
                throughput_fps: eval.estimated_throughput,
                imbalance: eval.imbalance,
                cut_edges: eval.cut_edges.iter().map(|&(p, c)| [p.0, c.0]).collect(),
            },
        }
    }

    pub fn partition(&self, stage_count: usize) -> Result<Partition, PartitionError> {
        let groups: Vec<Vec<StageId>> = self
            .devices
            .iter()
            .map(|g| g.iter().map(|&s| StageId(s)).collect())
            .collect();
        Partition::from_groups(&groups, stage_count, self.devices.len())
    }
}
