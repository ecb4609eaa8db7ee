use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use hpipe_core::model::{processing_time, Frames};
use hpipe_core::{
    compute_rates, enumerate_partitions, estimate_throughput, evaluate_partition, fixtures,
    partition_count, select_best, simulate_with_trace, speedup, steady_state_throughput, validate,
    Arrival, CommMode, Hierarchy, HierarchyConfig, HierarchyError, ModelParams, Partition,
    PartitionDocument, SearchMethod, SearchOptions, StageId, WorkloadSpec,
};
use hpipe_runtime::{
    profile_hierarchy, profile_link, profile_stage, run_coordinator, run_worker,
    CoordinatorOptions, DeploymentPlan, RuntimeError, StageKernel,
};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::report;
use crate::Failure;

pub type CmdResult = Result<(), Failure>;

/// Largest enumeration printed by `partition --all`.
const ALL_LIMIT: u128 = 100_000;

pub fn run(cli: &Cli) -> CmdResult {
    let out = Output {
        json: cli.json,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Validate { hierarchy } => cmd_validate(&out, hierarchy),
        Command::Rates { hierarchy } => cmd_rates(&out, hierarchy),
        Command::Partition(a) => cmd_partition(&out, a),
        Command::Estimate(a) => cmd_estimate(&out, a),
        Command::Simulate(a) => cmd_simulate(&out, a, cli.seed),
        Command::Profile(p) => cmd_profile(&out, p),
        Command::Worker(a) => cmd_worker(&out, a),
        Command::Coordinator(a) => cmd_coordinator(&out, a, cli.seed),
        Command::Report(a) => report::cmd_report(&out, a, cli.seed),
    }
}

pub struct Output {
    pub json: bool,
    pub quiet: bool,
}

impl Output {
    /// Pretty JSON with `--json`, otherwise the text rendering.
    pub fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> CmdResult {
        let s = if self.json {
            serde_json::to_string_pretty(value).map_err(Failure::domain)? + "\n"
        } else {
            text()
        };
        print_stdout(&s)
    }

    pub fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

pub fn print_stdout(s: &str) -> CmdResult {
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(s.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(Failure::usage)
}

/// Load a hierarchy file, or a bundled one named `builtin:<name>`.
pub fn load_hierarchy(path: &Path) -> Result<Hierarchy, Failure> {
    if let Some(name) = path.to_str().and_then(|s| s.strip_prefix("builtin:")) {
        return builtin(name)
            .ok_or_else(|| Failure::usage(anyhow!("no bundled hierarchy {name:?}")));
    }
    Hierarchy::from_path(path).map_err(|e| match e {
        HierarchyError::Io { .. } => Failure::usage(e),
        other => Failure::domain(other),
    })
}

pub fn builtin(name: &str) -> Option<Hierarchy> {
    Some(match name {
        "cifar10" => fixtures::cifar10(),
        "svhn" => fixtures::svhn(),
        "caltech256" => fixtures::caltech256(),
        "ten-leaves" | "ten_leaves" => fixtures::ten_leaves(),
        _ => return None,
    })
}

#[derive(Deserialize)]
struct GroupsDocument {
    #[serde(alias = "partition")]
    devices: Vec<Vec<u16>>,
}

/// Read `{"devices": [[stage, ...], ...]}` or a deployment plan; other fields are ignored.
pub fn load_partition(path: &Path, h: &Hierarchy) -> Result<Partition, Failure> {
    let text = read(path)?;
    let doc: GroupsDocument = serde_json::from_str(&text)
        .with_context(|| format!("parsing partition {}", path.display()))
        .map_err(Failure::domain)?;
    let groups: Vec<Vec<StageId>> = doc
        .devices
        .iter()
        .map(|g| g.iter().map(|&s| StageId(s)).collect())
        .collect();
    Partition::from_groups(&groups, h.len(), groups.len().max(1)).map_err(Failure::domain)
}

pub fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::usage)
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::usage)
}

fn runtime_failure(e: RuntimeError) -> Failure {
    match e {
        RuntimeError::Io { .. } => Failure::usage(e),
        other => Failure::domain(other),
    }
}

fn groups_text(p: &Partition) -> String {
    p.groups()
        .iter()
        .map(|g| {
            format!(
                "[{}]",
                g.iter()
                    .map(|s| s.0.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Serialize)]
struct ValidationOutput {
    valid: bool,
    violations: Vec<String>,
}

fn cmd_validate(out: &Output, path: &Path) -> CmdResult {
    let text = read(path)?;
    let violations = match HierarchyConfig::from_json(&text) {
        Ok(config) => validate(&config)
            .violations
            .iter()
            .map(|v| v.to_string())
            .collect(),
        Err(e) => vec![e.to_string()],
    };
    let valid = violations.is_empty();
    out.emit(
        &ValidationOutput {
            valid,
            violations: violations.clone(),
        },
        || {
            if valid {
                "ok\n".into()
            } else {
                violations.iter().map(|v| format!("{v}\n")).collect()
            }
        },
    )?;
    if valid {
        Ok(())
    } else {
        Err(Failure::domain(anyhow!(
            "{} violation(s)",
            violations.len()
        )))
    }
}

fn cmd_rates(out: &Output, path: &Path) -> CmdResult {
    let h = load_hierarchy(path)?;
    let rates = compute_rates(&h);
    out.emit(&rates, || {
        rates
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{i}\t{r}\n"))
            .collect()
    })
}

#[derive(Serialize, Deserialize)]
struct PartitionOutput {
    #[serde(flatten)]
    document: PartitionDocument,
    method: SearchMethod,
    frames: Frames,
}

fn select(
    h: &Hierarchy,
    devices: usize,
    frames: Frames,
    options: &SearchOptions,
) -> Result<(Partition, SearchMethod), Failure> {
    let sel =
        select_best(h, &compute_rates(h), devices, frames, options).map_err(Failure::domain)?;
    let used = sel.partition.devices_used();
    let compact =
        Partition::new(sel.partition.assignment().to_vec(), used).map_err(Failure::domain)?;
    Ok((compact, sel.method))
}

fn cmd_partition(out: &Output, a: &PartitionArgs) -> CmdResult {
    let h = load_hierarchy(&a.hierarchy)?;
    let rates = compute_rates(&h);
    let options = SearchOptions {
        budget: a.budget,
        allow_heuristic: a.heuristic,
        threads: a.threads,
    };
    if a.all {
        let count = partition_count(h.len(), a.devices);
        if count > ALL_LIMIT {
            return Err(Failure::domain(anyhow!(
                "{count} partitions is too many for --all (limit {ALL_LIMIT})"
            )));
        }
        let mut docs = Vec::new();
        for p in enumerate_partitions(h.len(), a.devices) {
            let e = evaluate_partition(&h, &rates, &p, a.frames).map_err(Failure::domain)?;
            docs.push(PartitionDocument::new(&p, &e));
        }
        out.emit(&docs, || {
            docs.iter()
                .map(|d| {
                    format!(
                        "{:?}\tT={:.4}\tb={:.6}\n",
                        d.devices, d.eval.throughput_fps, d.eval.comm_s
                    )
                })
                .collect()
        })?;
    }
    let (partition, method) = select(&h, a.devices, a.frames, &options)?;
    let eval = evaluate_partition(&h, &rates, &partition, a.frames).map_err(Failure::domain)?;
    if let Some(path) = &a.emit_plan {
        let plan = build_plan(&h, &partition, &a.plan)?;
        write_file(path, &(plan.to_json_pretty() + "\n"))?;
        out.note(&format!("plan written to {}", path.display()));
    }
    if a.all {
        return Ok(());
    }
    let result = PartitionOutput {
        document: PartitionDocument::new(&partition, &eval),
        method,
        frames: a.frames,
    };
    out.emit(&result, || {
        let mut s = String::new();
        for (j, g) in partition.groups().iter().enumerate() {
            let ids: Vec<String> = g.iter().map(|s| s.0.to_string()).collect();
            let _ = writeln!(
                s,
                "device {j}: {}  (load {:.6} s)",
                ids.join(" "),
                eval.device_loads[j]
            );
        }
        let _ = writeln!(s, "comm: {:.6} s", eval.comm_cost);
        let _ = writeln!(
            s,
            "throughput: {:.4} fps (F = {})",
            eval.estimated_throughput, a.frames
        );
        let _ = writeln!(s, "search: {method:?}");
        s
    })
}

fn build_plan(h: &Hierarchy, p: &Partition, a: &PlanArgs) -> Result<DeploymentPlan, Failure> {
    let mut plan = if a.endpoints.is_empty() {
        DeploymentPlan::localhost(h, p, a.base_port)
    } else {
        let coord = a
            .coordinator_endpoint
            .clone()
            .ok_or_else(|| Failure::usage(anyhow!("--endpoints needs --coordinator-endpoint")))?;
        DeploymentPlan::new(h, p, a.endpoints.clone(), coord)
    }
    .map_err(Failure::domain)?;
    plan.kernel = a.kernel;
    plan.comm_mode = a.comm_mode;
    plan.emulate_transfers = a.emulate_transfers;
    plan.payload_bytes = a.payload_bytes;
    Ok(plan)
}

#[derive(Serialize)]
struct EstimateRow {
    devices: usize,
    partition: Vec<Vec<u16>>,
    max_load_s: f64,
    comm_s: f64,
    throughput_fps: f64,
    speedup: f64,
}

#[derive(Serialize)]
struct ParamEstimate {
    frames: Frames,
    devices: usize,
    work_s: f64,
    comm_s: f64,
    throughput_fps: f64,
    steady_state_fps: f64,
    processing_time_s: Option<f64>,
}

#[derive(Serialize)]
struct SpeedupRow {
    throughput_fps: f64,
    speedup: f64,
}

fn cmd_estimate(out: &Output, a: &EstimateArgs) -> CmdResult {
    if !a.observed_fps.is_empty() && a.hierarchy.is_none() {
        let base = a.baseline_fps.unwrap_or(0.0);
        let rows = a
            .observed_fps
            .iter()
            .map(|&fps| {
                Ok(SpeedupRow {
                    throughput_fps: fps,
                    speedup: speedup(fps, base)?,
                })
            })
            .collect::<Result<Vec<_>, hpipe_core::ModelError>>()
            .map_err(Failure::domain)?;
        return out.emit(&rows, || {
            let mut s = String::from("throughput_fps\tspeedup\n");
            for r in &rows {
                let _ = writeln!(s, "{:.2}\t{:.2}x", r.throughput_fps, r.speedup);
            }
            s
        });
    }
    if let Some(lambda_ms) = a.lambda_ms {
        let params = ModelParams::new(
            a.frames,
            a.devices,
            lambda_ms / 1e3,
            a.sequential,
            a.tau_ms.unwrap_or(0.0) / 1e3,
            a.cuts,
            a.depth.unwrap_or(1),
        )
        .map_err(Failure::domain)?;
        let est = ParamEstimate {
            frames: a.frames,
            devices: a.devices,
            work_s: params.work_s,
            comm_s: params.comm_s,
            throughput_fps: estimate_throughput(&params).map_err(Failure::domain)?,
            steady_state_fps: steady_state_throughput(&params).map_err(Failure::domain)?,
            processing_time_s: processing_time(&params).ok(),
        };
        return out.emit(&est, || {
            let mut s = format!(
                "throughput: {:.4} fps\nsteady state: {:.4} fps\n",
                est.throughput_fps, est.steady_state_fps
            );
            if let Some(p) = est.processing_time_s {
                let _ = writeln!(s, "processing time: {p:.6} s");
            }
            s
        });
    }
    let path = a.hierarchy.as_ref().ok_or_else(|| {
        Failure::usage(anyhow!(
            "give a hierarchy file or --lambda-ms/--tau-ms/--depth"
        ))
    })?;
    let h = load_hierarchy(path)?;
    let rates = compute_rates(&h);
    let mut partitions = vec![Partition::single(h.len(), 1)];
    match &a.partition {
        Some(p) => partitions.push(load_partition(p, &h)?),
        None => {
            for n in 2..=a.devices {
                partitions.push(
                    select(
                        &h,
                        n,
                        a.frames,
                        &SearchOptions {
                            allow_heuristic: true,
                            ..Default::default()
                        },
                    )?
                    .0,
                );
            }
        }
    }
    let mut rows = Vec::new();
    let mut baseline = a.baseline_fps;
    for p in &partitions {
        let e = evaluate_partition(&h, &rates, p, a.frames).map_err(Failure::domain)?;
        let base = *baseline.get_or_insert(e.estimated_throughput);
        rows.push(EstimateRow {
            devices: p.device_count(),
            partition: p
                .groups()
                .iter()
                .map(|g| g.iter().map(|s| s.0).collect())
                .collect(),
            max_load_s: e.max_load,
            comm_s: e.comm_cost,
            throughput_fps: e.estimated_throughput,
            speedup: speedup(e.estimated_throughput, base).map_err(Failure::domain)?,
        });
    }
    out.emit(&rows, || {
        let mut s = String::from("devices\tthroughput_fps\tspeedup\tpartition\n");
        for (r, p) in rows.iter().zip(&partitions) {
            let _ = writeln!(
                s,
                "{}\t{:.2}\t{:.2}x\t{}",
                r.devices,
                r.throughput_fps,
                r.speedup,
                groups_text(p)
            );
        }
        s
    })
}

fn cmd_simulate(out: &Output, a: &SimulateArgs, seed: u64) -> CmdResult {
    let h = load_hierarchy(&a.hierarchy)?;
    let partition = resolve_partition(&h, &a.source, Frames::Finite(a.frames.max(1)))?;
    let spec = WorkloadSpec {
        frames: a.frames,
        arrival: match a.interval_ms {
            Some(ms) => Arrival::Interval {
                interval_s: ms / 1e3,
            },
            None => Arrival::BackToBack,
        },
        seed,
        window: a.window,
    };
    let (report, trace) =
        simulate_with_trace(&h, &partition, &spec, a.mode).map_err(Failure::domain)?;
    if let Some(path) = &a.trace {
        let mut s = String::new();
        for ev in &trace {
            s += &serde_json::to_string(ev).map_err(Failure::domain)?;
            s.push('\n');
        }
        write_file(path, &s)?;
    }
    out.emit(&report, || {
        format!(
            "frames: {}\ntotal time: {:.6} s\nthroughput: {:.4} fps\nlatency mean/p50/p99: {:.6}/{:.6}/{:.6} s\nutilization: {}\n",
            report.frames_completed,
            report.total_time_s,
            report.throughput_fps,
            report.latency.mean_s,
            report.latency.p50_s,
            report.latency.p99_s,
            report.device_utilization.iter().map(|u| format!("{u:.3}")).collect::<Vec<_>>().join(" ")
        )
    })
}

pub fn resolve_partition(
    h: &Hierarchy,
    src: &PartitionSource,
    frames: Frames,
) -> Result<Partition, Failure> {
    match (&src.partition, src.devices) {
        (Some(p), _) => load_partition(p, h),
        (None, Some(n)) => Ok(select(h, n, frames, &SearchOptions::default())?.0),
        (None, None) => Err(Failure::usage(anyhow!(
            "give --partition <file> or --devices <N>"
        ))),
    }
}

#[derive(Serialize)]
struct Measurement {
    median_s: f64,
}

fn cmd_profile(out: &Output, p: &ProfileCommand) -> CmdResult {
    match p {
        ProfileCommand::Stage {
            latency_ms,
            kind,
            repetitions,
        } => {
            let mut k = StageKernel::new(latency_ms / 1e3, *kind).calibrate();
            let m = Measurement {
                median_s: profile_stage(&mut k, *repetitions),
            };
            out.emit(&m, || format!("{:.6}\n", m.median_s))
        }
        ProfileCommand::Link {
            endpoint,
            payload_bytes,
            repetitions,
        } => {
            let m = Measurement {
                median_s: profile_link(endpoint, *payload_bytes, *repetitions)
                    .map_err(runtime_failure)?,
            };
            out.emit(&m, || format!("{:.6}\n", m.median_s))
        }
        ProfileCommand::Hierarchy {
            hierarchy,
            kind,
            repetitions,
            link,
            payload_bytes,
        } => {
            let h = load_hierarchy(hierarchy)?;
            let mut measured = profile_hierarchy(&h, *kind, *repetitions);
            if let Some(endpoint) = link {
                let tau = profile_link(endpoint, *payload_bytes, (*repetitions).max(9))
                    .map_err(runtime_failure)?;
                let transfers: Vec<f64> = measured
                    .stages()
                    .iter()
                    .map(|s| if s.id == StageId::ROOT { 0.0 } else { tau })
                    .collect();
                measured = measured.with_transfers(&transfers);
            }
            print_stdout(&(measured.to_json_pretty() + "\n"))
        }
    }
}

fn cmd_worker(out: &Output, a: &WorkerArgs) -> CmdResult {
    let plan = DeploymentPlan::from_path(&a.plan).map_err(runtime_failure)?;
    let metrics = run_worker(&a.listen, &plan, a.device).map_err(runtime_failure)?;
    out.emit(&metrics, || {
        format!(
            "device {} done: busy {:.3} s, {} frames handled\n",
            metrics.device,
            metrics.busy_s,
            metrics.hops.len()
        )
    })
}

fn cmd_coordinator(out: &Output, a: &CoordinatorArgs, seed: u64) -> CmdResult {
    let plan = DeploymentPlan::from_path(&a.plan).map_err(runtime_failure)?;
    let h = load_hierarchy(&a.hierarchy)?;
    if a.faithful && plan.comm_mode != CommMode::ModelFaithful {
        return Err(Failure::domain(anyhow!(
            "--faithful given but the plan's workers use {:?} communication",
            plan.comm_mode
        )));
    }
    let spec = WorkloadSpec {
        frames: a.frames,
        arrival: match a.interval_ms {
            Some(ms) => Arrival::Interval {
                interval_s: ms / 1e3,
            },
            None => Arrival::BackToBack,
        },
        seed,
        window: a.window,
    };
    let options = CoordinatorOptions {
        result_timeout: Duration::from_secs_f64(a.timeout_s),
        ..Default::default()
    };
    let report = match run_coordinator(&plan, &h, &spec, options) {
        Ok(r) => r,
        Err(RuntimeError::Timeout { waited_s, partial }) => {
            print_stdout(
                &(serde_json::to_string_pretty(&partial).map_err(Failure::domain)? + "\n"),
            )?;
            return Err(Failure::domain(anyhow!(
                "no RESULT within {waited_s:.1} s ({}/{} frames complete)",
                partial.frames_completed,
                partial.frames_injected
            )));
        }
        Err(e) => return Err(runtime_failure(e)),
    };
    out.emit(&report, || {
        format!(
            "frames: {}/{}\nthroughput: {:.4} fps\nlatency mean/p99: {:.6}/{:.6} s\nwall clock: {:.3} s\n",
            report.frames_completed,
            report.frames_injected,
            report.throughput_fps,
            report.latency.mean_s,
            report.latency.p99_s,
            report.wall_clock_s
        )
    })
}

pub fn path_near(base: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() || reference.starts_with("builtin:") {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}
