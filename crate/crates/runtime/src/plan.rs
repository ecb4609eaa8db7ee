//! Deployment plans: which endpoint runs which stages, and where each edge leads.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use hpipe_core::{CommMode, Hierarchy, HierarchyConfig, Partition, StageId};
use serde::{Deserialize, Serialize};

use crate::kernel::{KernelKind, StageKernel};
use crate::RuntimeError;

fn default_payload() -> u32 {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentPlan {
    pub hierarchy: HierarchyConfig,
    /// Stage ids per device.
    pub partition: Vec<Vec<u16>>,
    pub device_endpoints: Vec<String>,
    /// Where workers send RESULT and METRICS.
    pub coordinator: String,
    /// Stage → child stage → endpoint owning the child.
    pub routing: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub comm_mode: CommMode,
    /// Hold each cut-edge send for the child's configured transfer time.
    #[serde(default)]
    pub emulate_transfers: bool,
    #[serde(default)]
    pub kernel: KernelKind,
    #[serde(default = "default_payload")]
    pub payload_bytes: u32,
}

/// A plan checked against its hierarchy.
#[derive(Clone, Debug)]
pub struct ResolvedPlan {
    pub plan: DeploymentPlan,
    pub hierarchy: Hierarchy,
    pub partition: Partition,
}

impl DeploymentPlan {
    pub fn new(
        hierarchy: &Hierarchy,
        partition: &Partition,
        device_endpoints: Vec<String>,
        coordinator: String,
    ) -> Result<Self, RuntimeError> {
        let groups = partition.groups();
        if device_endpoints.len() != groups.len() {
            return Err(RuntimeError::Plan(format!(
                "{} endpoints for {} devices",
                device_endpoints.len(),
                groups.len()
            )));
        }
        let mut routing = BTreeMap::new();
        for stage in hierarchy.stages() {
            if stage.children.is_empty() {
                continue;
            }
            let table = stage
                .children
                .iter()
                .map(|c| {
                    (
                        c.0.to_string(),
                        device_endpoints[partition.device_of(*c)].clone(),
                    )
                })
                .collect();
            routing.insert(stage.id.0.to_string(), table);
        }
        let plan = DeploymentPlan {
            hierarchy: hierarchy.to_config(),
            partition: groups
                .iter()
                .map(|g| g.iter().map(|s| s.0).collect())
                .collect(),
            device_endpoints,
            coordinator,
            routing,
            comm_mode: CommMode::default(),
            emulate_transfers: false,
            kernel: KernelKind::default(),
            payload_bytes: default_payload(),
        };
        plan.resolve()?;
        Ok(plan)
    }

    /// Coordinator on `base_port`, device `j` on `base_port + 1 + j`, all on 127.0.0.1.
    pub fn localhost(
        hierarchy: &Hierarchy,
        partition: &Partition,
        base_port: u16,
    ) -> Result<Self, RuntimeError> {
        let endpoints = (0..partition.device_count())
            .map(|j| format!("127.0.0.1:{}", base_port as usize + 1 + j))
            .collect();
        Self::new(
            hierarchy,
            partition,
            endpoints,
            format!("127.0.0.1:{base_port}"),
        )
    }

    pub fn from_json(text: &str) -> Result<Self, RuntimeError> {
        serde_json::from_str(text).map_err(|e| RuntimeError::Plan(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RuntimeError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn device_count(&self) -> usize {
        self.partition.len()
    }

    /// Check every endpoint and routing entry against the embedded hierarchy.
    pub fn resolve(&self) -> Result<ResolvedPlan, RuntimeError> {
        let bad = |m: String| Err(RuntimeError::Plan(m));
        let hierarchy = Hierarchy::from_config(&self.hierarchy)
            .map_err(|e| RuntimeError::Plan(e.to_string()))?;
        let groups: Vec<Vec<StageId>> = self
            .partition
            .iter()
            .map(|g| g.iter().map(|&s| StageId(s)).collect())
            .collect();
        let partition = Partition::from_groups(&groups, hierarchy.len(), groups.len().max(1))
            .map_err(|e| RuntimeError::Plan(e.to_string()))?;
        if self.device_endpoints.len() != self.partition.len() {
            return bad(format!(
                "{} endpoints for {} devices",
                self.device_endpoints.len(),
                self.partition.len()
            ));
        }
        let unique: BTreeSet<&String> = self.device_endpoints.iter().collect();
        if unique.len() != self.device_endpoints.len() {
            return bad("device endpoints must be distinct".into());
        }
        let mut edges = 0;
        for stage in hierarchy.stages() {
            for child in &stage.children {
                edges += 1;
                let want = &self.device_endpoints[partition.device_of(*child)];
                match self
                    .routing
                    .get(&stage.id.0.to_string())
                    .and_then(|t| t.get(&child.0.to_string()))
                {
                    Some(got) if got == want => {}
                    Some(got) => {
                        return bad(format!(
                            "edge {}->{} routed to {got}, owner is {want}",
                            stage.id.0, child.0
                        ))
                    }
                    None => return bad(format!("no route for edge {}->{}", stage.id.0, child.0)),
                }
            }
        }
        let routed: usize = self.routing.values().map(|t| t.len()).sum();
        if routed != edges {
            return bad(format!(
                "routing lists {routed} edges, hierarchy has {edges}"
            ));
        }
        Ok(ResolvedPlan {
            plan: self.clone(),
            hierarchy,
            partition,
        })
    }
}

impl ResolvedPlan {
    pub fn kernel_for(&self, stage: StageId) -> StageKernel {
        StageKernel {
            target_latency_s: self.hierarchy.stage(stage).latency_s,
            payload_out: self.plan.payload_bytes,
            kind: self.plan.kernel,
        }
    }

    pub fn endpoint_of(&self, stage: StageId) -> &str {
        &self.plan.device_endpoints[self.partition.device_of(stage)]
    }
}
