//! Discrete-event simulation of a partitioned stage pipeline.
//!
//! Every device is a unit-capacity FIFO server. A frame walks its sampled
//! root-to-leaf path; consecutive stages on one device run back to back as a
//! single service. Crossing a cut edge costs the child's transfer time:
//!
//! * [`CommMode::ModelFaithful`] charges it to the sending device, which stays
//!   busy until the transfer ends.
//! * [`CommMode::Overlapped`] charges it to the link between the two devices
//!   (one transfer at a time per ordered device pair) and frees the sender.
//!
//! Simultaneous events are ordered by `(time, frame, stage)`, so a run is a
//! pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, StageId};
use crate::model::{estimate_throughput, processing_time, ModelParams};
use crate::partition::Partition;
use crate::routing::FrameRouter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CommMode {
    #[default]
    ModelFaithful,
    Overlapped,
}

impl std::str::FromStr for CommMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model-faithful" | "faithful" => Ok(CommMode::ModelFaithful),
            "overlapped" => Ok(CommMode::Overlapped),
            _ => Err(format!(
                "unknown mode {s:?}, expected model-faithful or overlapped"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Arrival {
    /// The source always has a frame ready; admission is limited by the in-flight window.
    #[default]
    BackToBack,
    /// Frame `i` arrives at `i * interval_s`.
    Interval { interval_s: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub frames: u64,
    #[serde(default)]
    pub arrival: Arrival,
    pub seed: u64,
    /// Frames in flight under back-to-back arrival; defaults to twice the device count.
    #[serde(default)]
    pub window: Option<usize>,
}

impl WorkloadSpec {
    pub fn back_to_back(frames: u64, seed: u64) -> Self {
        WorkloadSpec {
            frames,
            arrival: Arrival::BackToBack,
            seed,
            window: None,
        }
    }

    pub fn window_for(&self, partition: &Partition) -> usize {
        self.window.unwrap_or(2 * partition.device_count()).max(1)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("frame count must be at least 1")]
    NoFrames,
    #[error("partition covers {got} stages, hierarchy has {expected}")]
    Uncovered { expected: usize, got: usize },
    #[error("arrival interval must be positive and finite")]
    BadInterval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
    pub per_frame_s: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(per_frame_s: Vec<f64>) -> Self {
        let mut sorted = per_frame_s.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| {
            if sorted.is_empty() {
                return 0.0;
            }
            let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
            sorted[idx]
        };
        let mean_s = if sorted.is_empty() {
            0.0
        } else {
            per_frame_s.iter().sum::<f64>() / per_frame_s.len() as f64
        };
        LatencyStats {
            mean_s,
            p50_s: rank(0.5),
            p99_s: rank(0.99),
            per_frame_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: CommMode,
    pub frames_completed: u64,
    pub total_time_s: f64,
    pub throughput_fps: f64,
    pub latency: LatencyStats,
    pub device_busy_s: Vec<f64>,
    pub device_utilization: Vec<f64>,
    /// Sampled leaf of each frame, by frame index.
    pub leaves: Vec<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Inject,
    StageStart,
    StageEnd,
    SendStart,
    SendEnd,
    Complete,
}

/// One line of the `--trace` event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_s: f64,
    pub kind: TraceKind,
    pub frame: u64,
    pub stage: u16,
    pub device: usize,
}

#[derive(Clone, Copy, Debug)]
enum EventKind {
    Arrive,
    DeviceDone { device: usize },
    LinkDone { from: usize, to: usize },
}

#[derive(Clone, Copy, Debug)]
struct Event {
    time: f64,
    frame: u64,
    stage: u16,
    seq: u64,
    /// Path position the frame reaches when this event fires.
    pos: usize,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.frame.cmp(&self.frame))
            .then(other.stage.cmp(&self.stage))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Server {
    queue: VecDeque<(u64, usize)>,
    busy: bool,
}

struct FrameState {
    path: Vec<StageId>,
    injected_at: f64,
}

struct Engine<'a> {
    hierarchy: &'a Hierarchy,
    partition: &'a Partition,
    mode: CommMode,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    devices: Vec<Server>,
    links: BTreeMap<(usize, usize), Server>,
    frames: Vec<FrameState>,
    busy: Vec<f64>,
    completed_at: Vec<f64>,
    completed: u64,
    trace: Option<Vec<TraceEvent>>,
}

impl Engine<'_> {
    fn record(&mut self, time_s: f64, kind: TraceKind, frame: u64, stage: StageId, device: usize) {
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent {
                time_s,
                kind,
                frame,
                stage: stage.0,
                device,
            });
        }
    }

    fn push(&mut self, time: f64, frame: u64, pos: usize, kind: EventKind) {
        let path = &self.frames[frame as usize].path;
        let stage = path[pos.min(path.len() - 1)].0;
        self.seq += 1;
        self.heap.push(Event {
            time,
            frame,
            stage,
            seq: self.seq,
            pos,
            kind,
        });
    }

    fn device_of(&self, frame: u64, pos: usize) -> usize {
        self.partition
            .device_of(self.frames[frame as usize].path[pos])
    }

    fn inject(&mut self, frame: u64) {
        self.frames[frame as usize].injected_at = self.now;
        let device = self.device_of(frame, 0);
        self.record(self.now, TraceKind::Inject, frame, StageId::ROOT, device);
        self.devices[device].queue.push_back((frame, 0));
        self.start_device(device);
    }

    fn start_device(&mut self, device: usize) {
        if self.devices[device].busy {
            return;
        }
        let Some((frame, pos)) = self.devices[device].queue.pop_front() else {
            return;
        };
        self.devices[device].busy = true;

        let path_len = self.frames[frame as usize].path.len();
        let mut t = self.now;
        let mut end = pos;
        while end < path_len && self.device_of(frame, end) == device {
            let stage = self.frames[frame as usize].path[end];
            let latency = self.hierarchy.stage(stage).latency_s;
            self.record(t, TraceKind::StageStart, frame, stage, device);
            t += latency;
            self.record(t, TraceKind::StageEnd, frame, stage, device);
            end += 1;
        }
        if end < path_len && self.mode == CommMode::ModelFaithful {
            let child = self.frames[frame as usize].path[end];
            self.record(t, TraceKind::SendStart, frame, child, device);
            t += self.hierarchy.stage(child).transfer_s;
            self.record(t, TraceKind::SendEnd, frame, child, device);
        }
        self.busy[device] += t - self.now;
        self.push(t, frame, end, EventKind::DeviceDone { device });
    }

    fn start_link(&mut self, from: usize, to: usize) {
        let link = self.links.entry((from, to)).or_default();
        if link.busy {
            return;
        }
        let Some((frame, pos)) = link.queue.pop_front() else {
            return;
        };
        link.busy = true;
        let child = self.frames[frame as usize].path[pos];
        self.record(self.now, TraceKind::SendStart, frame, child, from);
        let done = self.now + self.hierarchy.stage(child).transfer_s;
        self.push(done, frame, pos, EventKind::LinkDone { from, to });
    }

    fn arrive_at(&mut self, frame: u64, pos: usize) {
        let device = self.device_of(frame, pos);
        self.devices[device].queue.push_back((frame, pos));
        self.start_device(device);
    }
}

/// Run the pipeline for `spec.frames` frames and report what happened.
pub fn simulate(
    hierarchy: &Hierarchy,
    partition: &Partition,
    spec: &WorkloadSpec,
    mode: CommMode,
) -> Result<SimReport, SimError> {
    run(hierarchy, partition, spec, mode, false).map(|(r, _)| r)
}

/// [`simulate`] plus the full event log in processing order.
pub fn simulate_with_trace(
    hierarchy: &Hierarchy,
    partition: &Partition,
    spec: &WorkloadSpec,
    mode: CommMode,
) -> Result<(SimReport, Vec<TraceEvent>), SimError> {
    run(hierarchy, partition, spec, mode, true)
}

fn run(
    hierarchy: &Hierarchy,
    partition: &Partition,
    spec: &WorkloadSpec,
    mode: CommMode,
    trace: bool,
) -> Result<(SimReport, Vec<TraceEvent>), SimError> {
    if spec.frames == 0 {
        return Err(SimError::NoFrames);
    }
    if partition.assignment().len() != hierarchy.len() {
        return Err(SimError::Uncovered {
            expected: hierarchy.len(),
            got: partition.assignment().len(),
        });
    }
    if let Arrival::Interval { interval_s } = spec.arrival {
        if interval_s <= 0.0 || !interval_s.is_finite() {
            return Err(SimError::BadInterval);
        }
    }

    let router = FrameRouter::new(hierarchy, spec.seed);
    let leaves = router.leaves(spec.frames);
    let n_dev = partition.device_count();
    let mut engine = Engine {
        hierarchy,
        partition,
        mode,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        devices: (0..n_dev).map(|_| Server::default()).collect(),
        links: BTreeMap::new(),
        frames: leaves
            .iter()
            .map(|&leaf| FrameState {
                path: hierarchy.path_to(leaf),
                injected_at: 0.0,
            })
            .collect(),
        busy: vec![0.0; n_dev],
        completed_at: vec![0.0; spec.frames as usize],
        completed: 0,
        trace: trace.then(Vec::new),
    };

    let mut next_frame = 0u64;
    match spec.arrival {
        Arrival::BackToBack => {
            let window = spec.window_for(partition) as u64;
            while next_frame < spec.frames.min(window) {
                engine.inject(next_frame);
                next_frame += 1;
            }
        }
        Arrival::Interval { interval_s } => {
            for f in 0..spec.frames {
                engine.push(f as f64 * interval_s, f, 0, EventKind::Arrive);
            }
            next_frame = spec.frames;
        }
    }

    while let Some(ev) = engine.heap.pop() {
        engine.now = ev.time;
        match ev.kind {
            EventKind::Arrive => engine.inject(ev.frame),
            EventKind::DeviceDone { device } => {
                engine.devices[device].busy = false;
                let path_len = engine.frames[ev.frame as usize].path.len();
                if ev.pos == path_len {
                    let leaf = engine.frames[ev.frame as usize].path[path_len - 1];
                    engine.record(ev.time, TraceKind::Complete, ev.frame, leaf, device);
                    engine.completed_at[ev.frame as usize] = ev.time;
                    engine.completed += 1;
                    if spec.arrival == Arrival::BackToBack && next_frame < spec.frames {
                        engine.inject(next_frame);
                        next_frame += 1;
                    }
                } else {
                    match mode {
                        CommMode::ModelFaithful => engine.arrive_at(ev.frame, ev.pos),
                        CommMode::Overlapped => {
                            let to = engine.device_of(ev.frame, ev.pos);
                            let link = engine.links.entry((device, to)).or_default();
                            link.queue.push_back((ev.frame, ev.pos));
                            engine.start_link(device, to);
                        }
                    }
                }
                engine.start_device(device);
            }
            EventKind::LinkDone { from, to } => {
                let child = engine.frames[ev.frame as usize].path[ev.pos];
                engine.record(ev.time, TraceKind::SendEnd, ev.frame, child, from);
                engine.links.get_mut(&(from, to)).expect("link exists").busy = false;
                engine.arrive_at(ev.frame, ev.pos);
                engine.start_link(from, to);
            }
        }
    }

    debug_assert_eq!(engine.completed, spec.frames);
    let total_time_s = engine.completed_at.iter().copied().fold(0.0, f64::max);
    let latencies = engine
        .completed_at
        .iter()
        .zip(&engine.frames)
        .map(|(&done, f)| done - f.injected_at)
        .collect();
    let report = SimReport {
        mode,
        frames_completed: engine.completed,
        total_time_s,
        throughput_fps: spec.frames as f64 / total_time_s,
        latency: LatencyStats::from_samples(latencies),
        device_utilization: engine.busy.iter().map(|b| b / total_time_s).collect(),
        device_busy_s: engine.busy,
        leaves: leaves.iter().map(|l| l.0).collect(),
    };
    Ok((report, engine.trace.unwrap_or_default()))
}

/// Relative gaps `(observed - model) / model` between a measured run and the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub model_fps: f64,
    pub observed_fps: f64,
    pub throughput_rel_err: f64,
    pub model_time_s: Option<f64>,
    pub observed_time_s: f64,
    pub time_rel_err: Option<f64>,
}

/// Compare measured throughput and total time against the model estimate.
pub fn compare_to_model(
    observed_fps: f64,
    observed_time_s: f64,
    params: &ModelParams,
) -> DeviationReport {
    let model_fps = estimate_throughput(params).unwrap_or(f64::NAN);
    let model_time_s = processing_time(params).ok();
    DeviationReport {
        model_fps,
        observed_fps,
        throughput_rel_err: (observed_fps - model_fps) / model_fps,
        model_time_s,
        observed_time_s,
        time_rel_err: model_time_s.map(|m| (observed_time_s - m) / m),
    }
}

/// [`compare_to_model`] for a simulator report.
pub fn compare_report(report: &SimReport, params: &ModelParams) -> DeviationReport {
    compare_to_model(report.throughput_fps, report.total_time_s, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Frames;

    fn chain(lat: f64) -> Hierarchy {
        Hierarchy::from_json(&format!(
            r#"{{"stages":[{{"id":0,"latency_s":{lat},"children":[1]}},
                {{"id":1,"latency_s":{lat},"children":[2]}},{{"id":2,"latency_s":{lat}}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn textbook_pipeline() {
        let h = chain(0.01);
        let p = Partition::new(vec![0, 1, 2], 3).unwrap();
        let r = simulate(
            &h,
            &p,
            &WorkloadSpec::back_to_back(1000, 1),
            CommMode::ModelFaithful,
        )
        .unwrap();
        // F frames through 3 equal stages: (F + 2) * λ.
        assert!((r.total_time_s - 1002.0 * 0.01).abs() < 1e-9);
        assert!((r.throughput_fps - 100.0).abs() / 100.0 < 0.01);
        assert!((r.latency.per_frame_s[0] - 0.03).abs() < 1e-12);
    }

    #[test]
    fn interval_arrivals_see_no_queueing() {
        let h = chain(0.01);
        let p = Partition::new(vec![0, 1, 2], 3).unwrap();
        let spec = WorkloadSpec {
            frames: 20,
            arrival: Arrival::Interval { interval_s: 0.02 },
            seed: 3,
            window: None,
        };
        let r = simulate(&h, &p, &spec, CommMode::Overlapped).unwrap();
        assert!(r
            .latency
            .per_frame_s
            .iter()
            .all(|&l| (l - 0.03).abs() < 1e-12));
        assert!((r.total_time_s - (19.0 * 0.02 + 0.03)).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let h = chain(0.01);
        let p = Partition::single(3, 1);
        assert_eq!(
            simulate(
                &h,
                &p,
                &WorkloadSpec::back_to_back(0, 1),
                CommMode::ModelFaithful
            ),
            Err(SimError::NoFrames)
        );
        assert!(matches!(
            simulate(
                &h,
                &Partition::single(2, 1),
                &WorkloadSpec::back_to_back(3, 1),
                CommMode::ModelFaithful
            ),
            Err(SimError::Uncovered { .. })
        ));
        let spec = WorkloadSpec {
            frames: 2,
            arrival: Arrival::Interval { interval_s: 0.0 },
            seed: 3,
            window: None,
        };
        assert_eq!(
            simulate(&h, &p, &spec, CommMode::ModelFaithful),
            Err(SimError::BadInterval)
        );
    }

    #[test]
    fn faithful_transfer_blocks_sender() {
        let h = Hierarchy::from_json(
            r#"{"stages":[{"id":0,"latency_s":0.01,"children":[1]},
                {"id":1,"latency_s":0.01,"transfer_s":0.005}]}"#,
        )
        .unwrap();
        let p = Partition::new(vec![0, 1], 2).unwrap();
        let spec = WorkloadSpec::back_to_back(100, 0);
        let f = simulate(&h, &p, &spec, CommMode::ModelFaithful).unwrap();
        let o = simulate(&h, &p, &spec, CommMode::Overlapped).unwrap();
        // Sender busy 15 ms per frame vs. 10 ms when the link carries the transfer.
        assert!((f.device_busy_s[0] - 1.5).abs() < 1e-9);
        assert!((o.device_busy_s[0] - 1.0).abs() < 1e-9);
        assert!(o.throughput_fps >= f.throughput_fps);
        assert!((f.latency.per_frame_s[0] - 0.025).abs() < 1e-12);
    }

    #[test]
    fn trace_is_well_formed() {
        let h = chain(0.01);
        let p = Partition::new(vec![0, 0, 1], 2).unwrap();
        let (r, trace) = simulate_with_trace(
            &h,
            &p,
            &WorkloadSpec::back_to_back(5, 1),
            CommMode::ModelFaithful,
        )
        .unwrap();
        let count = |k| trace.iter().filter(|e| e.kind == k).count();
        assert_eq!(count(TraceKind::Inject), 5);
        assert_eq!(count(TraceKind::Complete), 5);
        assert_eq!(count(TraceKind::StageStart), 15);
        assert_eq!(count(TraceKind::SendStart), 5);
        assert_eq!(r.frames_completed, 5);
    }

    #[test]
    fn deviation_arithmetic() {
        let params = ModelParams::new(Frames::Steady, 1, 1.0 / 30.0, 1.0, 0.0, 0.0, 1).unwrap();
        let d = compare_to_model(28.0, 1.0, &params);
        assert!((d.throughput_rel_err + 0.0667).abs() < 1e-3);
        assert!(d.time_rel_err.is_none());
        let d = compare_to_model(30.0, 1.0, &params);
        assert!(d.throughput_rel_err.abs() < 1e-12);
    }

    #[test]
    fn latency_percentiles() {
        let s = LatencyStats::from_samples((1..=100).map(|i| i as f64).collect());
        assert_eq!(s.p50_s, 50.0);
        assert_eq!(s.p99_s, 99.0);
        assert_eq!(s.mean_s, 50.5);
    }
}
