//! Model vs simulation vs live-run comparison table.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use hpipe_core::model::Frames;
use hpipe_core::{
    compare_to_model, compute_rates, evaluate_partition, params_from_partition, simulate, CommMode,
    Partition, SearchOptions, WorkloadSpec,
};
use hpipe_runtime::RunReport;
use serde::{Deserialize, Serialize};

use crate::args::ReportArgs;
use crate::commands::{
    load_hierarchy, load_partition, path_near, print_stdout, read, CmdResult, Output,
};
use crate::Failure;

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Path relative to the scenario file, or `builtin:<name>`.
    pub hierarchy: String,
    pub devices: usize,
    pub frames: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub latency_scale: f64,
    #[serde(default = "one")]
    pub transfer_scale: f64,
    #[serde(default)]
    pub mode: CommMode,
    /// Fixed partition document; the selected partition otherwise.
    #[serde(default)]
    pub partition: Option<String>,
    /// Live RunReport for the same scenario.
    #[serde(default)]
    pub run: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub model_fps: f64,
    pub sim_fps: f64,
    pub run_fps: Option<f64>,
    pub sim_dev_pct: f64,
    pub run_dev_pct: Option<f64>,
}

/// Bundled hierarchies at two latency scales, two transfer scales and two frame counts.
pub fn sweep(seed: u64) -> Vec<Scenario> {
    let mut out = Vec::new();
    for h in ["cifar10", "svhn", "caltech256", "ten-leaves"] {
        for (lat_name, lat) in [("slow-cpu", 1.0), ("fast-cpu", 0.5)] {
            for (tr_name, tr) in [("wireless", 1.0), ("wired", 0.2)] {
                for frames in [100, 1000] {
                    out.push(Scenario {
                        name: format!("{h}/{lat_name}/{tr_name}/F{frames}"),
                        hierarchy: format!("builtin:{h}"),
                        devices: 3,
                        frames,
                        seed: Some(seed),
                        latency_scale: lat,
                        transfer_scale: tr,
                        mode: CommMode::ModelFaithful,
                        partition: None,
                        run: None,
                    });
                }
            }
        }
    }
    out
}

fn inconsistent(name: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::domain(anyhow!("scenario {name}: {msg}"))
}

fn evaluate(base: &Path, s: &Scenario, seed: u64) -> Result<Row, Failure> {
    let bad = |m: String| inconsistent(&s.name, m);
    if s.frames == 0 || s.devices == 0 {
        return Err(bad("frames and devices must be at least 1".into()));
    }
    let h = load_hierarchy(&path_near(base, &s.hierarchy))
        .map_err(|f| match f {
            Failure::Usage(e) | Failure::Domain(e) => bad(format!("{e:#}")),
        })?
        .scaled(s.latency_scale, s.transfer_scale);
    let rates = compute_rates(&h);
    let frames = Frames::Finite(s.frames);
    let partition = match &s.partition {
        Some(p) => load_partition(&path_near(base, p), &h).map_err(|f| match f {
            Failure::Usage(e) | Failure::Domain(e) => bad(format!("{e:#}")),
        })?,
        None => {
            let sel =
                hpipe_core::select_best(&h, &rates, s.devices, frames, &SearchOptions::default())
                    .map_err(|e| bad(e.to_string()))?;
            let used = sel.partition.devices_used();
            Partition::new(sel.partition.assignment().to_vec(), used)
                .map_err(|e| bad(e.to_string()))?
        }
    };
    if partition.devices_used() > s.devices {
        return Err(bad(format!(
            "partition uses {} devices, scenario has {}",
            partition.devices_used(),
            s.devices
        )));
    }
    let eval =
        evaluate_partition(&h, &rates, &partition, frames).map_err(|e| bad(e.to_string()))?;
    let params = params_from_partition(&h, &rates, &partition, &eval, frames);
    let spec = WorkloadSpec::back_to_back(s.frames, s.seed.unwrap_or(seed));
    let sim = simulate(&h, &partition, &spec, s.mode).map_err(|e| bad(e.to_string()))?;
    let sim_dev = compare_to_model(sim.throughput_fps, sim.total_time_s, &params);
    let run = match &s.run {
        None => None,
        Some(r) => {
            let path = path_near(base, r);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
            let run: RunReport =
                serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
            if run.frames_completed != s.frames || run.frames_injected != s.frames {
                return Err(bad(format!(
                    "run completed {}/{} frames, scenario has {}",
                    run.frames_completed, run.frames_injected, s.frames
                )));
            }
            if run.leaves != sim.leaves {
                return Err(bad(
                    "run routed frames differently; seed or hierarchy differs".into(),
                ));
            }
            if run.mode != s.mode {
                return Err(bad(format!(
                    "run used {:?} communication, scenario {:?}",
                    run.mode, s.mode
                )));
            }
            Some(compare_to_model(
                run.throughput_fps,
                run.total_time_s,
                &params,
            ))
        }
    };
    Ok(Row {
        scenario: s.name.clone(),
        model_fps: sim_dev.model_fps,
        sim_fps: sim.throughput_fps,
        run_fps: run.as_ref().map(|d| d.observed_fps),
        sim_dev_pct: 100.0 * sim_dev.throughput_rel_err,
        run_dev_pct: run.as_ref().map(|d| 100.0 * d.throughput_rel_err),
    })
}

pub fn rows(base: &Path, scenarios: &[Scenario], seed: u64) -> Result<Vec<Row>, Failure> {
    let mut names = BTreeSet::new();
    for s in scenarios {
        if !names.insert(&s.name) {
            return Err(inconsistent(&s.name, "duplicate scenario name"));
        }
    }
    scenarios.iter().map(|s| evaluate(base, s, seed)).collect()
}

pub fn to_csv(rows: &[Row]) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(Failure::domain)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Failure::domain(anyhow!("{e}")))?;
    String::from_utf8(bytes).map_err(Failure::domain)
}

pub fn cmd_report(out: &Output, a: &ReportArgs, seed: u64) -> CmdResult {
    let (base, scenarios) = match &a.scenarios {
        Some(path) => {
            let text = read(path)?;
            let list: Vec<Scenario> = serde_json::from_str(&text)
                .map_err(|e| Failure::domain(anyhow!("{}: {e}", path.display())))?;
            (path.clone(), list)
        }
        None => (PathBuf::from("."), sweep(seed)),
    };
    let rows = rows(&base, &scenarios, seed)?;
    let body = if out.json {
        serde_json::to_string_pretty(&rows).map_err(Failure::domain)? + "\n"
    } else {
        to_csv(&rows)?
    };
    match &a.out {
        Some(path) => std::fs::write(path, body)
            .map_err(|e| Failure::usage(anyhow!("cannot write {}: {e}", path.display()))),
        None => print_stdout(&body),
    }
}
