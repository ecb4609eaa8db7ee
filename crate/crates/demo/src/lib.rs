//! Browser bindings: partition explorer, device-scaling curve and a pipeline timeline.
//!
//! Every export takes a hierarchy as JSON and returns JSON; the plain Rust
//! functions underneath are usable (and tested) off the web.

use std::collections::HashMap;

use hpipe_core::model::Frames;
use hpipe_core::{
    compute_rates, evaluate_partition, fixtures, select_best, simulate, simulate_with_trace,
    speedup, CommMode, Hierarchy, Partition, PartitionDocument, SearchMethod, SearchOptions,
    SimReport, TraceKind, WorkloadSpec,
};
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("hierarchy: {0}")]
    Hierarchy(#[from] hpipe_core::HierarchyError),
    #[error("partition: {0}")]
    Partition(#[from] hpipe_core::PartitionError),
    #[error("model: {0}")]
    Model(#[from] hpipe_core::ModelError),
    #[error("simulation: {0}")]
    Sim(#[from] hpipe_core::SimError),
    #[error("unknown bundled hierarchy {0:?}")]
    UnknownBuiltin(String),
    #[error("{0}")]
    Invalid(String),
}

fn frames_of(frames: u32) -> Frames {
    if frames == 0 {
        Frames::Steady
    } else {
        Frames::Finite(frames.into())
    }
}

fn options() -> SearchOptions {
    SearchOptions {
        allow_heuristic: true,
        threads: Some(1),
        ..SearchOptions::default()
    }
}

/// Pretty JSON of a bundled hierarchy.
pub fn builtin_json(name: &str) -> Result<String, DemoError> {
    Ok(match name {
        "cifar10" => fixtures::CIFAR10_JSON,
        "svhn" => fixtures::SVHN_JSON,
        "caltech256" => fixtures::CALTECH256_JSON,
        "ten-leaves" => fixtures::TEN_LEAVES_JSON,
        other => return Err(DemoError::UnknownBuiltin(other.to_string())),
    }
    .to_string())
}

#[derive(Debug, Serialize)]
pub struct StageView {
    pub id: u16,
    pub parent: Option<u16>,
    pub latency_s: f64,
    pub transfer_s: f64,
    pub rate: f64,
    pub device: usize,
}

#[derive(Debug, Serialize)]
pub struct PartitionView {
    #[serde(flatten)]
    pub document: PartitionDocument,
    pub method: SearchMethod,
    pub stages: Vec<StageView>,
}

/// Best partition over at most `devices` devices; `frames == 0` scores the steady state.
pub fn partition_view(
    hierarchy: &Hierarchy,
    devices: usize,
    frames: u32,
) -> Result<PartitionView, DemoError> {
    let rates = compute_rates(hierarchy);
    let sel = select_best(hierarchy, &rates, devices, frames_of(frames), &options())?;
    let stages = hierarchy
        .stages()
        .iter()
        .map(|s| StageView {
            id: s.id.0,
            parent: hierarchy.parent(s.id).map(|p| p.0),
            latency_s: s.latency_s,
            transfer_s: s.transfer_s,
            rate: rates.get(s.id),
            device: sel.partition.device_of(s.id),
        })
        .collect();
    Ok(PartitionView {
        document: PartitionDocument::new(&sel.partition, &sel.eval),
        method: sel.method,
        stages,
    })
}

#[derive(Debug, Serialize)]
pub struct ScalingRow {
    pub devices: usize,
    pub devices_used: usize,
    pub model_fps: f64,
    pub sim_fps: f64,
    pub speedup: f64,
}

/// Model and simulated throughput of the best partition for 1..=`max_devices` devices.
pub fn scaling_rows(
    hierarchy: &Hierarchy,
    max_devices: usize,
    frames: u32,
    seed: u64,
) -> Result<Vec<ScalingRow>, DemoError> {
    if frames == 0 {
        return Err(DemoError::Invalid(
            "the scaling curve needs a finite frame count".into(),
        ));
    }
    let rates = compute_rates(hierarchy);
    let f = frames_of(frames);
    let single = evaluate_partition(hierarchy, &rates, &Partition::single(hierarchy.len(), 1), f)?;
    let spec = WorkloadSpec::back_to_back(frames.into(), seed);
    (1..=max_devices)
        .map(|n| {
            let sel = select_best(hierarchy, &rates, n, f, &options())?;
            let sim = simulate(hierarchy, &sel.partition, &spec, CommMode::ModelFaithful)?;
            Ok(ScalingRow {
                devices: n,
                devices_used: sel.partition.devices_used(),
                model_fps: sel.eval.estimated_throughput,
                sim_fps: sim.throughput_fps,
                speedup: speedup(sel.eval.estimated_throughput, single.estimated_throughput)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Span {
    pub device: usize,
    pub frame: u64,
    pub stage: u16,
    pub start_s: f64,
    pub end_s: f64,
    pub send: bool,
}

#[derive(Debug, Serialize)]
pub struct Timeline {
    pub report: SimReport,
    pub model_fps: f64,
    pub spans: Vec<Span>,
}

/// Simulate the best partition and return busy spans for the first `shown` frames.
pub fn timeline(
    hierarchy: &Hierarchy,
    devices: usize,
    frames: u32,
    seed: u64,
    mode: CommMode,
    shown: u64,
) -> Result<Timeline, DemoError> {
    if frames == 0 {
        return Err(DemoError::Invalid(
            "simulation needs a finite frame count".into(),
        ));
    }
    let rates = compute_rates(hierarchy);
    let sel = select_best(hierarchy, &rates, devices, frames_of(frames), &options())?;
    let spec = WorkloadSpec::back_to_back(frames.into(), seed);
    let (report, trace) = simulate_with_trace(hierarchy, &sel.partition, &spec, mode)?;
    let mut open: HashMap<(u64, u16, bool), f64> = HashMap::new();
    let mut spans = Vec::new();
    for ev in trace.iter().filter(|e| e.frame < shown) {
        match ev.kind {
            TraceKind::StageStart | TraceKind::SendStart => {
                open.insert(
                    (ev.frame, ev.stage, ev.kind == TraceKind::SendStart),
                    ev.time_s,
                );
            }
            TraceKind::StageEnd | TraceKind::SendEnd => {
                let send = ev.kind == TraceKind::SendEnd;
                if let Some(start_s) = open.remove(&(ev.frame, ev.stage, send)) {
                    spans.push(Span {
                        device: ev.device,
                        frame: ev.frame,
                        stage: ev.stage,
                        start_s,
                        end_s: ev.time_s,
                        send,
                    });
                }
            }
            TraceKind::Inject | TraceKind::Complete => {}
        }
    }
    Ok(Timeline {
        report,
        model_fps: sel.eval.estimated_throughput,
        spans,
    })
}

fn to_js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(to_js)
}

fn parse(hierarchy_json: &str) -> Result<Hierarchy, JsError> {
    Hierarchy::from_json(hierarchy_json).map_err(to_js)
}

#[wasm_bindgen]
pub fn builtin(name: &str) -> Result<String, JsError> {
    builtin_json(name).map_err(to_js)
}

#[wasm_bindgen]
pub fn partition(hierarchy_json: &str, devices: usize, frames: u32) -> Result<String, JsError> {
    json(&partition_view(&parse(hierarchy_json)?, devices, frames).map_err(to_js)?)
}

#[wasm_bindgen]
pub fn scaling(
    hierarchy_json: &str,
    max_devices: usize,
    frames: u32,
    seed: u64,
) -> Result<String, JsError> {
    json(&scaling_rows(&parse(hierarchy_json)?, max_devices, frames, seed).map_err(to_js)?)
}

#[wasm_bindgen]
pub fn simulate_timeline(
    hierarchy_json: &str,
    devices: usize,
    frames: u32,
    seed: u64,
    overlapped: bool,
    shown: u32,
) -> Result<String, JsError> {
    let mode = if overlapped {
        CommMode::Overlapped
    } else {
        CommMode::ModelFaithful
    };
    json(
        &timeline(
            &parse(hierarchy_json)?,
            devices,
            frames,
            seed,
            mode,
            shown.into(),
        )
        .map_err(to_js)?,
    )
}
