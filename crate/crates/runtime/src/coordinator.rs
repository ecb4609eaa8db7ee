//! Frame source and result sink for a live run.

use std::collections::BTreeMap;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use hpipe_core::{Arrival, CommMode, FrameRouter, Hierarchy, LatencyStats, StageId, WorkloadSpec};
use serde::{Deserialize, Serialize};

use crate::net::{connect_with_backoff, io_err, Backoff};
use crate::plan::{DeploymentPlan, ResolvedPlan};
use crate::wire::{MsgType, WireMessage};
use crate::worker::{Tally, WorkerMetrics};
use crate::RuntimeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: CommMode,
    pub frames_injected: u64,
    pub frames_completed: u64,
    /// Last RESULT minus first injection.
    pub total_time_s: f64,
    pub throughput_fps: f64,
    pub latency: LatencyStats,
    pub device_busy_s: Vec<f64>,
    pub device_utilization: Vec<f64>,
    pub leaves: Vec<u16>,
    /// Messages each frame caused between processes, RESULT included.
    pub hops_per_frame: Vec<u64>,
    /// Mean kernel time by stage id.
    pub measured_stage_latency_s: BTreeMap<String, f64>,
    /// Mean cut-edge send time by child stage id.
    pub measured_transfer_s: BTreeMap<String, f64>,
    /// Connect through shutdown.
    pub wall_clock_s: f64,
}

impl RunReport {
    /// `hierarchy` with every measured stage latency and transfer time substituted.
    pub fn measured_hierarchy(&self, hierarchy: &Hierarchy) -> Hierarchy {
        let pick = |m: &BTreeMap<String, f64>, id: StageId, fallback: f64| {
            m.get(&id.0.to_string()).copied().unwrap_or(fallback)
        };
        let lat: Vec<f64> = hierarchy
            .stages()
            .iter()
            .map(|s| pick(&self.measured_stage_latency_s, s.id, s.latency_s))
            .collect();
        let tr: Vec<f64> = hierarchy
            .stages()
            .iter()
            .map(|s| pick(&self.measured_transfer_s, s.id, s.transfer_s))
            .collect();
        hierarchy.with_latencies(&lat).with_transfers(&tr)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoordinatorOptions {
    /// Longest wait for the next RESULT before aborting.
    pub result_timeout: Duration,
    pub backoff: Backoff,
}

impl Default for CoordinatorOptions {
    fn default() -> Self {
        CoordinatorOptions {
            result_timeout: Duration::from_secs(30),
            backoff: Backoff::default(),
        }
    }
}

enum Event {
    Result { frame: u64, leaf: u16, at: Instant },
    Metrics(WorkerMetrics),
    Fatal(RuntimeError),
}

pub struct Coordinator {
    listener: TcpListener,
    options: CoordinatorOptions,
}

/// Run `spec` through the workers of `plan`, listening on the plan's coordinator endpoint.
pub fn run_coordinator(
    plan: &DeploymentPlan,
    hierarchy: &Hierarchy,
    spec: &WorkloadSpec,
    options: CoordinatorOptions,
) -> Result<RunReport, RuntimeError> {
    let resolved = plan.resolve()?;
    if !same_hierarchy(&resolved.hierarchy, hierarchy) {
        return Err(RuntimeError::Plan(
            "hierarchy differs from the one embedded in the plan".into(),
        ));
    }
    Coordinator::bind(&plan.coordinator, options)?.run(plan, spec)
}

/// Equal structure, and equal timings and probabilities up to rounding.
fn same_hierarchy(a: &Hierarchy, b: &Hierarchy) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0);
    a.len() == b.len()
        && a.stages().iter().zip(b.stages()).all(|(s, t)| {
            s.id == t.id
                && s.children == t.children
                && close(s.latency_s, t.latency_s)
                && close(s.transfer_s, t.transfer_s)
                && close(a.leaf_probability(s.id), b.leaf_probability(t.id))
        })
}

impl Coordinator {
    pub fn bind(addr: &str, options: CoordinatorOptions) -> Result<Self, RuntimeError> {
        let listener = TcpListener::bind(addr).map_err(io_err(format!("binding {addr}")))?;
        Ok(Self::from_listener(listener, options))
    }

    pub fn from_listener(listener: TcpListener, options: CoordinatorOptions) -> Self {
        Coordinator { listener, options }
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    pub fn run(
        self,
        plan: &DeploymentPlan,
        spec: &WorkloadSpec,
    ) -> Result<RunReport, RuntimeError> {
        let plan = plan.resolve()?;
        if spec.frames == 0 {
            return Err(hpipe_core::SimError::NoFrames.into());
        }
        if let Arrival::Interval { interval_s } = spec.arrival {
            if !(interval_s.is_finite() && interval_s > 0.0) {
                return Err(hpipe_core::SimError::BadInterval.into());
            }
        }
        let wall = Instant::now();
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(self.listener, tx, stop.clone())?;
        let outcome = Session::open(&plan, self.options).and_then(|mut s| {
            let out = s.drive(spec, &rx);
            s.finish(out, &rx, wall)
        });
        stop.store(true, Ordering::Relaxed);
        let _ = acceptor.join();
        outcome
    }
}

fn spawn_acceptor(
    listener: TcpListener,
    tx: Sender<Event>,
    stop: Arc<AtomicBool>,
) -> Result<thread::JoinHandle<()>, RuntimeError> {
    listener
        .set_nonblocking(true)
        .map_err(io_err("configuring listener"))?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let tx = tx.clone();
                    thread::spawn(move || read_worker(stream, tx));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(2))
                }
                Err(e) => {
                    let _ = tx.send(Event::Fatal(io_err("accepting")(e)));
                    return;
                }
            }
        }
    }))
}

fn read_worker(stream: TcpStream, tx: Sender<Event>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let mut reader = &stream;
    loop {
        let event = match WireMessage::read_from(&mut reader) {
            Ok(None) => return,
            Ok(Some(m)) if m.msg_type == MsgType::Result => Event::Result {
                frame: m.frame_id,
                leaf: m.stage_id,
                at: Instant::now(),
            },
            Ok(Some(m)) if m.msg_type == MsgType::Metrics => {
                match serde_json::from_slice(&m.payload) {
                    Ok(metrics) => Event::Metrics(metrics),
                    Err(e) => {
                        Event::Fatal(RuntimeError::Protocol(format!("bad METRICS payload: {e}")))
                    }
                }
            }
            Ok(Some(m)) => Event::Fatal(RuntimeError::Protocol(format!(
                "coordinator received {:?}",
                m.msg_type
            ))),
            Err(e) => Event::Fatal(e.into()),
        };
        let fatal = matches!(event, Event::Fatal(_));
        if tx.send(event).is_err() || fatal {
            return;
        }
    }
}

struct Session<'a> {
    plan: &'a ResolvedPlan,
    options: CoordinatorOptions,
    workers: Vec<TcpStream>,
    leaves: Vec<u16>,
    injected_at: Vec<Option<Instant>>,
    completed_at: Vec<Option<Instant>>,
    completed: u64,
    metrics: Vec<Option<WorkerMetrics>>,
}

impl<'a> Session<'a> {
    fn open(plan: &'a ResolvedPlan, options: CoordinatorOptions) -> Result<Self, RuntimeError> {
        let mut workers = Vec::new();
        for endpoint in &plan.plan.device_endpoints {
            let mut s = connect_with_backoff(endpoint, options.backoff)?;
            WireMessage::ping(0, Vec::new()).write_to(&mut s)?;
            match WireMessage::read_from(&mut s)? {
                Some(m) if m.msg_type == MsgType::ProfilePong => {}
                other => {
                    return Err(RuntimeError::Protocol(format!(
                        "{endpoint} answered ping with {:?}",
                        other.map(|m| m.msg_type)
                    )))
                }
            }
            workers.push(s);
        }
        Ok(Session {
            plan,
            options,
            workers,
            leaves: Vec::new(),
            injected_at: Vec::new(),
            completed_at: Vec::new(),
            completed: 0,
            metrics: vec![None; plan.plan.device_count()],
        })
    }

    fn injected(&self) -> u64 {
        self.injected_at.iter().filter(|t| t.is_some()).count() as u64
    }

    fn drive(&mut self, spec: &WorkloadSpec, rx: &Receiver<Event>) -> Result<(), RuntimeError> {
        let router = FrameRouter::new(&self.plan.hierarchy, spec.seed);
        self.leaves = router
            .leaves(spec.frames)
            .into_iter()
            .map(|l| l.0)
            .collect();
        self.injected_at = vec![None; spec.frames as usize];
        self.completed_at = vec![None; spec.frames as usize];
        let window = spec.window_for(&self.plan.partition) as u64;
        let root = self.plan.partition.device_of(StageId::ROOT);
        let payload = vec![0u8; self.plan.plan.payload_bytes as usize];
        let mut start = None;
        for frame in 0..spec.frames {
            if let Arrival::Interval { interval_s } = spec.arrival {
                if let Some(t0) = start {
                    let due: Instant = t0 + Duration::from_secs_f64(interval_s * frame as f64);
                    while Instant::now() < due {
                        self.wait_event(rx, Some(due))?;
                    }
                }
            }
            while frame - self.completed >= window {
                self.wait_event(rx, None)?;
            }
            let now = Instant::now();
            start.get_or_insert(now);
            self.injected_at[frame as usize] = Some(now);
            WireMessage::frame(
                frame,
                StageId::ROOT.0,
                self.leaves[frame as usize],
                payload.clone(),
            )
            .write_to(&mut self.workers[root])?;
        }
        while self.completed < spec.frames {
            self.wait_event(rx, None)?;
        }
        Ok(())
    }

    /// Handle one event, or return at `until` if given.
    fn wait_event(
        &mut self,
        rx: &Receiver<Event>,
        until: Option<Instant>,
    ) -> Result<(), RuntimeError> {
        let limit = until.map_or(self.options.result_timeout, |u| {
            u.saturating_duration_since(Instant::now())
        });
        match rx.recv_timeout(limit) {
            Ok(Event::Result { frame, leaf, at }) => {
                let idx = frame as usize;
                if self.injected_at.get(idx).copied().flatten().is_none() {
                    return Err(RuntimeError::Protocol(format!(
                        "RESULT for frame {frame} that was never injected"
                    )));
                }
                if self.completed_at[idx].is_some() {
                    return Err(RuntimeError::Protocol(format!(
                        "duplicate RESULT for frame {frame}"
                    )));
                }
                if self.leaves[idx] != leaf {
                    return Err(RuntimeError::Protocol(format!(
                        "frame {frame} finished at {leaf}, routed to {}",
                        self.leaves[idx]
                    )));
                }
                self.completed_at[idx] = Some(at);
                self.completed += 1;
                Ok(())
            }
            Ok(Event::Metrics(m)) => Err(RuntimeError::Protocol(format!(
                "unsolicited METRICS from device {}",
                m.device
            ))),
            Ok(Event::Fatal(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) if until.is_some() => Ok(()),
            Err(RecvTimeoutError::Timeout) => Err(RuntimeError::Timeout {
                waited_s: limit.as_secs_f64(),
                partial: Box::new(self.report(Instant::now())),
            }),
            Err(RecvTimeoutError::Disconnected) => {
                Err(RuntimeError::Protocol("result channel closed".into()))
            }
        }
    }

    fn finish(
        &mut self,
        outcome: Result<(), RuntimeError>,
        rx: &Receiver<Event>,
        wall: Instant,
    ) -> Result<RunReport, RuntimeError> {
        for (j, w) in self.workers.iter_mut().enumerate() {
            if let Err(e) = WireMessage::shutdown().write_to(w) {
                log::warn!("could not send SHUTDOWN to device {j}: {e}");
            }
        }
        if outcome.is_ok() {
            let deadline = Instant::now() + self.options.result_timeout;
            while self.metrics.iter().any(Option::is_none) {
                match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                    Ok(Event::Metrics(m)) if m.device < self.metrics.len() => {
                        let d = m.device;
                        self.metrics[d] = Some(m);
                    }
                    Ok(Event::Metrics(m)) => {
                        return Err(RuntimeError::Protocol(format!(
                            "METRICS from unknown device {}",
                            m.device
                        )))
                    }
                    Ok(Event::Result { frame, .. }) => {
                        return Err(RuntimeError::Protocol(format!(
                            "RESULT for frame {frame} after completion"
                        )))
                    }
                    Ok(Event::Fatal(e)) => return Err(e),
                    Err(_) => {
                        return Err(RuntimeError::Timeout {
                            waited_s: self.options.result_timeout.as_secs_f64(),
                            partial: Box::new(self.report(wall)),
                        })
                    }
                }
            }
        }
        for w in &self.workers {
            let _ = w.shutdown(Shutdown::Both);
        }
        outcome?;
        let mut report = self.report(wall);
        report.wall_clock_s = wall.elapsed().as_secs_f64();
        Ok(report)
    }

    fn report(&self, wall: Instant) -> RunReport {
        let first = self.injected_at.iter().flatten().min().copied();
        let last = self.completed_at.iter().flatten().max().copied();
        let total_time_s = match (first, last) {
            (Some(a), Some(b)) => b.saturating_duration_since(a).as_secs_f64(),
            _ => 0.0,
        };
        let per_frame_s = self
            .injected_at
            .iter()
            .zip(&self.completed_at)
            .filter_map(|(i, c)| {
                Some(
                    c.as_ref()?
                        .saturating_duration_since(*i.as_ref()?)
                        .as_secs_f64(),
                )
            })
            .collect();
        let n = self.plan.plan.device_count();
        let mut busy = vec![0.0; n];
        let mut hops = vec![0u64; self.leaves.len()];
        let mut stage = BTreeMap::<String, Tally>::new();
        let mut transfer = BTreeMap::<String, Tally>::new();
        for m in self.metrics.iter().flatten() {
            busy[m.device] = m.busy_s;
            for &[f, k] in &m.hops {
                if let Some(h) = hops.get_mut(f as usize) {
                    *h += k;
                }
            }
            for (s, t) in &m.stage_time_s {
                stage.entry(s.clone()).or_default().merge(*t);
            }
            for (s, t) in &m.send_time_s {
                transfer.entry(s.clone()).or_default().merge(*t);
            }
        }
        let means = |m: BTreeMap<String, Tally>| {
            m.into_iter()
                .filter_map(|(k, t)| Some((k, t.mean()?)))
                .collect()
        };
        RunReport {
            mode: self.plan.plan.comm_mode,
            frames_injected: self.injected(),
            frames_completed: self.completed,
            total_time_s,
            throughput_fps: if total_time_s > 0.0 {
                self.completed as f64 / total_time_s
            } else {
                0.0
            },
            latency: LatencyStats::from_samples(per_frame_s),
            device_utilization: busy
                .iter()
                .map(|b| {
                    if total_time_s > 0.0 {
                        b / total_time_s
                    } else {
                        0.0
                    }
                })
                .collect(),
            device_busy_s: busy,
            leaves: self.leaves.clone(),
            hops_per_frame: hops,
            measured_stage_latency_s: means(stage),
            measured_transfer_s: means(transfer),
            wall_clock_s: wall.elapsed().as_secs_f64(),
        }
    }
}
