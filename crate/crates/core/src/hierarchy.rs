//! Stage trees, their validation, and per-stage rates of use.
//!
//! A [`Hierarchy`] is a rooted tree of compute stages. Every frame enters at
//! the root and is routed down exactly one root-to-leaf path, so the share of
//! frames a stage sees (its rate of use) is the probability mass of the leaves
//! below it.
//!
//! The on-disk form is [`HierarchyConfig`], a JSON document:
//!
//! ```text
//! { "stages": [ { "id": 0, "latency_s": 0.038, "transfer_s": 0.0, "children": [1, 3] }, ... ],
//!   "leaf_probabilities": { "2": 0.6, "4": 0.3, "5": 0.1 } }
//! ```
//!
//! Omitting `leaf_probabilities` makes every leaf equally likely.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// Absolute tolerance on the leaf probability sum. Sums within it are renormalized.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Dense stage index; `StageId(0)` is always the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageId(pub u16);

impl StageId {
    pub const ROOT: StageId = StageId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One stage of a validated hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub id: StageId,
    /// Seconds for one device to push one frame through this stage.
    pub latency_s: f64,
    /// Seconds to ship this stage's input from its parent's device when the
    /// parent edge is cut. Always zero for the root.
    pub transfer_s: f64,
    pub children: Vec<StageId>,
}

impl Stage {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Raw stage record as it appears in a hierarchy file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub id: u32,
    pub latency_s: f64,
    #[serde(default)]
    pub transfer_s: f64,
    #[serde(default)]
    pub children: Vec<u32>,
}

/// Raw, possibly malformed hierarchy document. Turn it into a [`Hierarchy`]
/// with [`Hierarchy::from_config`], or inspect it with [`validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_probabilities: Option<BTreeMap<String, f64>>,
}

impl HierarchyConfig {
    pub fn from_json(text: &str) -> Result<Self, HierarchyError> {
        serde_json::from_str(text).map_err(|e| HierarchyError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("malformed hierarchy at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid hierarchy:\n{0}")]
    Invalid(ValidationReport),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A single broken invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoStages,
    DuplicateId(u32),
    IdOutOfRange { id: u32, stage_count: usize },
    NonPositiveLatency { id: u32, latency_s: f64 },
    NegativeTransfer { id: u32, transfer_s: f64 },
    RootTransfer { transfer_s: f64 },
    UnknownChild { parent: u32, child: u32 },
    RootHasParent { parent: u32 },
    MultipleParents { child: u32, parents: Vec<u32> },
    Orphan(u32),
    Unreachable(u32),
    BadProbabilityKey(String),
    ProbabilityNotLeaf(u32),
    MissingProbability(u32),
    ProbabilityOutOfRange { id: u32, probability: f64 },
    ProbabilitySum(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStages => write!(f, "hierarchy has no stages"),
            Violation::DuplicateId(id) => write!(f, "duplicate stage id {id}"),
            Violation::IdOutOfRange { id, stage_count } => write!(
                f,
                "stage id {id} out of range: ids must be dense 0..{}",
                stage_count.saturating_sub(1)
            ),
            Violation::NonPositiveLatency { id, latency_s } => {
                write!(f, "stage {id} has nonpositive latency {latency_s}")
            }
            Violation::NegativeTransfer { id, transfer_s } => {
                write!(f, "stage {id} has negative transfer time {transfer_s}")
            }
            Violation::RootTransfer { transfer_s } => {
                write!(f, "root transfer time must be 0, got {transfer_s}")
            }
            Violation::UnknownChild { parent, child } => {
                write!(f, "stage {parent} lists unknown child {child}")
            }
            Violation::RootHasParent { parent } => {
                write!(f, "root stage 0 is listed as a child of stage {parent}")
            }
            Violation::MultipleParents { child, parents } => {
                write!(f, "stage {child} has multiple parents {parents:?}")
            }
            Violation::Orphan(id) => write!(f, "stage {id} has no parent (orphan)"),
            Violation::Unreachable(id) => {
                write!(f, "stage {id} is not reachable from the root (cycle)")
            }
            Violation::BadProbabilityKey(key) => {
                write!(f, "leaf probability key {key:?} is not a stage id")
            }
            Violation::ProbabilityNotLeaf(id) => {
                write!(f, "leaf probability given for non-leaf stage {id}")
            }
            Violation::MissingProbability(id) => {
                write!(f, "leaf stage {id} has no probability")
            }
            Violation::ProbabilityOutOfRange { id, probability } => {
                write!(f, "leaf {id} probability {probability} outside [0, 1]")
            }
            Violation::ProbabilitySum(sum) => {
                write!(f, "leaf probabilities sum to {}", trim_float(*sum))
            }
        }
    }
}

fn trim_float(x: f64) -> String {
    let s = format!("{x:.9}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Every violated invariant of a hierarchy document, in discovery order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check every structural and probabilistic invariant of a hierarchy document.
///
/// The report is empty iff [`Hierarchy::from_config`] would accept `config`.
pub fn validate(config: &HierarchyConfig) -> ValidationReport {
    let mut out = Vec::new();
    let n = config.stages.len();
    if n == 0 {
        out.push(Violation::NoStages);
        return ValidationReport { violations: out };
    }

    let mut seen = BTreeSet::new();
    let mut by_id: BTreeMap<u32, &StageConfig> = BTreeMap::new();
    for s in &config.stages {
        if !seen.insert(s.id) {
            out.push(Violation::DuplicateId(s.id));
            continue;
        }
        if s.id as usize >= n || s.id > u16::MAX as u32 {
            out.push(Violation::IdOutOfRange {
                id: s.id,
                stage_count: n,
            });
        }
        by_id.insert(s.id, s);
        if s.latency_s <= 0.0 || !s.latency_s.is_finite() {
            out.push(Violation::NonPositiveLatency {
                id: s.id,
                latency_s: s.latency_s,
            });
        }
        if s.transfer_s < 0.0 || !s.transfer_s.is_finite() {
            out.push(Violation::NegativeTransfer {
                id: s.id,
                transfer_s: s.transfer_s,
            });
        }
        if s.id == 0 && s.transfer_s != 0.0 && s.transfer_s >= 0.0 {
            out.push(Violation::RootTransfer {
                transfer_s: s.transfer_s,
            });
        }
    }

    let mut parents: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for s in by_id.values() {
        for &c in &s.children {
            if !by_id.contains_key(&c) {
                out.push(Violation::UnknownChild {
                    parent: s.id,
                    child: c,
                });
                continue;
            }
            parents.entry(c).or_default().push(s.id);
        }
    }
    for (&child, ps) in &parents {
        if child == 0 {
            out.push(Violation::RootHasParent { parent: ps[0] });
        } else if ps.len() > 1 {
            out.push(Violation::MultipleParents {
                child,
                parents: ps.clone(),
            });
        }
    }
    for &id in by_id.keys() {
        if id != 0 && !parents.contains_key(&id) {
            out.push(Violation::Orphan(id));
        }
    }

    // Reachability from the root catches cycles among stages that do have parents.
    if by_id.contains_key(&0) {
        let mut reached = BTreeSet::new();
        let mut queue = VecDeque::from([0u32]);
        while let Some(id) = queue.pop_front() {
            if !reached.insert(id) {
                continue;
            }
            if let Some(s) = by_id.get(&id) {
                queue.extend(s.children.iter().copied().filter(|c| by_id.contains_key(c)));
            }
        }
        for &id in by_id.keys() {
            if !reached.contains(&id) && parents.contains_key(&id) {
                out.push(Violation::Unreachable(id));
            }
        }
    }

    if let Some(probs) = &config.leaf_probabilities {
        let mut sum = 0.0;
        let mut given = BTreeSet::new();
        for (key, &p) in probs {
            let Ok(id) = key.trim().parse::<u32>() else {
                out.push(Violation::BadProbabilityKey(key.clone()));
                continue;
            };
            match by_id.get(&id) {
                Some(s) if s.children.is_empty() => {}
                _ => out.push(Violation::ProbabilityNotLeaf(id)),
            }
            if !(0.0..=1.0).contains(&p) {
                out.push(Violation::ProbabilityOutOfRange { id, probability: p });
            }
            given.insert(id);
            sum += p;
        }
        for s in by_id.values() {
            if s.children.is_empty() && !given.contains(&s.id) {
                out.push(Violation::MissingProbability(s.id));
            }
        }
        if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
            out.push(Violation::ProbabilitySum(sum));
        }
    }

    ValidationReport { violations: out }
}

/// A validated stage tree with normalized leaf probabilities.
///
/// Stages are stored densely by id. Instances are immutable; the `with_*`
/// helpers return modified copies.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    stages: Vec<Stage>,
    parents: Vec<Option<StageId>>,
    leaf_probability: Vec<f64>,
}

impl Hierarchy {
    pub fn from_config(config: &HierarchyConfig) -> Result<Self, HierarchyError> {
        let report = validate(config);
        if !report.is_empty() {
            return Err(HierarchyError::Invalid(report));
        }
        let n = config.stages.len();
        let mut stages: Vec<Option<Stage>> = vec![None; n];
        for s in &config.stages {
            stages[s.id as usize] = Some(Stage {
                id: StageId(s.id as u16),
                latency_s: s.latency_s,
                transfer_s: s.transfer_s,
                children: s.children.iter().map(|&c| StageId(c as u16)).collect(),
            });
        }
        let stages: Vec<Stage> = stages.into_iter().map(|s| s.expect("dense ids")).collect();

        let mut parents = vec![None; n];
        for s in &stages {
            for &c in &s.children {
                parents[c.index()] = Some(s.id);
            }
        }

        let mut leaf_probability = vec![0.0; n];
        match &config.leaf_probabilities {
            Some(probs) => {
                let sum: f64 = probs.values().sum();
                for (key, &p) in probs {
                    let id: usize = key.trim().parse().expect("validated key");
                    leaf_probability[id] = p / sum;
                }
            }
            None => {
                let leaves = stages.iter().filter(|s| s.is_leaf()).count();
                for s in stages.iter().filter(|s| s.is_leaf()) {
                    leaf_probability[s.id.index()] = 1.0 / leaves as f64;
                }
            }
        }

        Ok(Hierarchy {
            stages,
            parents,
            leaf_probability,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, HierarchyError> {
        Self::from_config(&HierarchyConfig::from_json(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, HierarchyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HierarchyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Config document for this hierarchy; leaf probabilities are always explicit.
    pub fn to_config(&self) -> HierarchyConfig {
        HierarchyConfig {
            stages: self
                .stages
                .iter()
                .map(|s| StageConfig {
                    id: s.id.0 as u32,
                    latency_s: s.latency_s,
                    transfer_s: s.transfer_s,
                    children: s.children.iter().map(|c| c.0 as u32).collect(),
                })
                .collect(),
            leaf_probabilities: Some(
                self.leaves()
                    .map(|l| (l.to_string(), self.leaf_probability[l.index()]))
                    .collect(),
            ),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_config()).expect("config serializes")
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage(&self, id: StageId) -> &Stage {
        &self.stages[id.index()]
    }

    pub fn parent(&self, id: StageId) -> Option<StageId> {
        self.parents[id.index()]
    }

    /// Leaf stages in id order.
    pub fn leaves(&self) -> impl Iterator<Item = StageId> + '_ {
        self.stages.iter().filter(|s| s.is_leaf()).map(|s| s.id)
    }

    /// Normalized probability that a frame ends at `leaf` (0 for internal stages).
    pub fn leaf_probability(&self, id: StageId) -> f64 {
        self.leaf_probability[id.index()]
    }

    /// `(leaf, probability)` pairs in id order.
    pub fn leaf_distribution(&self) -> Vec<(StageId, f64)> {
        self.leaves()
            .map(|l| (l, self.leaf_probability(l)))
            .collect()
    }

    /// Stages from the root down to `stage`, inclusive.
    pub fn path_to(&self, stage: StageId) -> Vec<StageId> {
        let mut path = vec![stage];
        let mut cur = stage;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Copy with each latency multiplied by `latency_scale` and each transfer
    /// time by `transfer_scale`.
    pub fn scaled(&self, latency_scale: f64, transfer_scale: f64) -> Hierarchy {
        let mut h = self.clone();
        for s in &mut h.stages {
            s.latency_s *= latency_scale;
            s.transfer_s *= transfer_scale;
        }
        h
    }

    /// Copy with stage latencies replaced, e.g. by profiled values.
    pub fn with_latencies(&self, latencies: &[f64]) -> Hierarchy {
        assert_eq!(latencies.len(), self.len(), "one latency per stage");
        let mut h = self.clone();
        for (s, &l) in h.stages.iter_mut().zip(latencies) {
            assert!(l > 0.0, "latency must be positive");
            s.latency_s = l;
        }
        h
    }

    /// Copy with non-root transfer times replaced; `transfers[0]` is ignored.
    pub fn with_transfers(&self, transfers: &[f64]) -> Hierarchy {
        assert_eq!(transfers.len(), self.len(), "one transfer time per stage");
        let mut h = self.clone();
        for (s, &t) in h.stages.iter_mut().zip(transfers).skip(1) {
            assert!(t >= 0.0, "transfer time must be nonnegative");
            s.transfer_s = t;
        }
        h
    }
}

/// Fraction of frames each stage processes.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageRates {
    rate: Vec<f64>,
}

impl UsageRates {
    pub fn get(&self, id: StageId) -> f64 {
        self.rate[id.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rate
    }
}

impl Serialize for UsageRates {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.rate.len()))?;
        for (i, r) in self.rate.iter().enumerate() {
            map.serialize_entry(&i.to_string(), r)?;
        }
        map.end()
    }
}

/// Rate of use of every stage: the leaf probability mass of its subtree.
pub fn compute_rates(hierarchy: &Hierarchy) -> UsageRates {
    let mut rate = hierarchy.leaf_probability.clone();
    // Children are accumulated into parents deepest-first.
    for id in bfs_order(hierarchy).into_iter().rev() {
        let s = hierarchy.stage(id);
        if !s.is_leaf() {
            rate[id.index()] = s.children.iter().map(|c| rate[c.index()]).sum();
        }
    }
    UsageRates { rate }
}

fn bfs_order(hierarchy: &Hierarchy) -> Vec<StageId> {
    let mut order = Vec::with_capacity(hierarchy.len());
    let mut queue = VecDeque::from([StageId::ROOT]);
    while let Some(id) = queue.pop_front() {
        order.push(id);
        queue.extend(hierarchy.stage(id).children.iter().copied());
    }
    order
}

/// Number of stages on the longest root-to-leaf path.
pub fn depth(hierarchy: &Hierarchy) -> usize {
    let mut depth = vec![0usize; hierarchy.len()];
    depth[0] = 1;
    let mut max = 1;
    for id in bfs_order(hierarchy) {
        let d = depth[id.index()];
        max = max.max(d);
        for c in &hierarchy.stage(id).children {
            depth[c.index()] = d + 1;
        }
    }
    max
}

/// One path per leaf, each from the root to that leaf, in depth-first child order.
pub fn root_leaf_paths(hierarchy: &Hierarchy) -> Vec<Vec<StageId>> {
    fn walk(h: &Hierarchy, id: StageId, prefix: &mut Vec<StageId>, out: &mut Vec<Vec<StageId>>) {
        prefix.push(id);
        let s = h.stage(id);
        if s.is_leaf() {
            out.push(prefix.clone());
        } else {
            for &c in &s.children {
                walk(h, c, prefix, out);
            }
        }
        prefix.pop();
    }
    let mut out = Vec::new();
    walk(hierarchy, StageId::ROOT, &mut Vec::new(), &mut out);
    out
}
