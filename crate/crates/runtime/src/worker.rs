//! One device of the pipeline.
//!
//! An acceptor thread spawns a reader per inbound connection; readers answer
//! pings themselves and hand frames to the device loop, which executes
//! stages strictly one at a time.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use hpipe_core::{CommMode, StageId};
use serde::{Deserialize, Serialize};

use crate::kernel::{run_until, CalibratedKernel};
use crate::net::{connect_with_backoff, io_err, Backoff};
use crate::plan::{DeploymentPlan, ResolvedPlan};
use crate::wire::{MsgType, WireMessage};
use crate::RuntimeError;

/// Running total of timed events.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total_s: f64,
    pub count: u64,
}

impl Tally {
    pub fn add(&mut self, s: f64) {
        self.total_s += s;
        self.count += 1;
    }

    pub fn merge(&mut self, other: Tally) {
        self.total_s += other.total_s;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total_s / self.count as f64)
    }
}

/// Payload of a worker's METRICS message.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerMetrics {
    pub device: usize,
    /// Kernel plus blocking-send time.
    pub busy_s: f64,
    /// Kernel durations by stage id.
    pub stage_time_s: BTreeMap<String, Tally>,
    /// Cut-edge send durations by child stage id.
    pub send_time_s: BTreeMap<String, Tally>,
    /// `[frame_id, messages sent]`: FRAME forwards plus the RESULT.
    pub hops: Vec<[u64; 2]>,
}

enum Inbound {
    Frame(WireMessage),
    Shutdown,
    Fatal(RuntimeError),
}

pub struct Worker {
    listener: TcpListener,
    plan: ResolvedPlan,
    device: usize,
    backoff: Backoff,
}

/// Bind `listen` and serve `device` of `plan` until SHUTDOWN.
pub fn run_worker(
    listen: &str,
    plan: &DeploymentPlan,
    device: usize,
) -> Result<WorkerMetrics, RuntimeError> {
    Worker::bind(listen, plan, device)?.run()
}

impl Worker {
    pub fn bind(listen: &str, plan: &DeploymentPlan, device: usize) -> Result<Self, RuntimeError> {
        let plan = plan.resolve()?;
        let listener = TcpListener::bind(listen).map_err(io_err(format!("binding {listen}")))?;
        Self::from_listener(listener, plan, device)
    }

    /// Serve on an already bound listener.
    pub fn from_listener(
        listener: TcpListener,
        plan: ResolvedPlan,
        device: usize,
    ) -> Result<Self, RuntimeError> {
        if device >= plan.plan.device_count() {
            return Err(RuntimeError::Plan(format!(
                "device {device} out of range for {} devices",
                plan.plan.device_count()
            )));
        }
        Ok(Worker {
            listener,
            plan,
            device,
            backoff: Backoff::default(),
        })
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    pub fn run(self) -> Result<WorkerMetrics, RuntimeError> {
        let Worker {
            listener,
            plan,
            device,
            backoff,
        } = self;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(listener, tx, stop.clone())?;
        let result = DeviceLoop::new(plan, device, backoff).serve(rx);
        stop.store(true, Ordering::Relaxed);
        let _ = acceptor.join();
        result
    }
}

fn spawn_acceptor(
    listener: TcpListener,
    tx: Sender<Inbound>,
    stop: Arc<AtomicBool>,
) -> Result<JoinHandle<()>, RuntimeError> {
    listener
        .set_nonblocking(true)
        .map_err(io_err("configuring listener"))?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let tx = tx.clone();
                    thread::spawn(move || read_connection(stream, tx));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(2))
                }
                Err(e) => {
                    let _ = tx.send(Inbound::Fatal(io_err("accepting")(e)));
                    return;
                }
            }
        }
    }))
}

fn read_connection(stream: TcpStream, tx: Sender<Inbound>) {
    let fatal = |e: RuntimeError| {
        let _ = tx.send(Inbound::Fatal(e));
    };
    if let Err(e) = stream
        .set_nonblocking(false)
        .and_then(|_| stream.set_nodelay(true))
    {
        return fatal(io_err("configuring connection")(e));
    }
    let mut reader = &stream;
    let mut writer = &stream;
    loop {
        let msg = match WireMessage::read_from(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(e) => return fatal(e.into()),
        };
        match msg.msg_type {
            MsgType::Frame => {
                if tx.send(Inbound::Frame(msg)).is_err() {
                    return;
                }
            }
            MsgType::ProfilePing => {
                if WireMessage::pong(&msg).write_to(&mut writer).is_err() {
                    return;
                }
            }
            MsgType::Shutdown => {
                let _ = tx.send(Inbound::Shutdown);
            }
            other => return fatal(RuntimeError::Protocol(format!("worker received {other:?}"))),
        }
    }
}

/// Outbound connection that reconnects once on a failed write.
struct Link {
    endpoint: String,
    stream: Option<TcpStream>,
    backoff: Backoff,
}

impl Link {
    fn new(endpoint: String, backoff: Backoff) -> Self {
        Link {
            endpoint,
            stream: None,
            backoff,
        }
    }

    fn send(&mut self, msg: &WireMessage) -> Result<(), RuntimeError> {
        let bytes = msg.encode()?;
        for attempt in 0..2 {
            if self.stream.is_none() {
                self.stream = Some(connect_with_backoff(&self.endpoint, self.backoff)?);
            }
            match self.stream.as_mut().unwrap().write_all(&bytes) {
                Ok(()) => return Ok(()),
                Err(e) if attempt == 0 => {
                    log::warn!("send to {} failed ({e}); reconnecting", self.endpoint);
                    self.stream = None;
                }
                Err(e) => return Err(io_err(format!("sending to {}", self.endpoint))(e)),
            }
        }
        unreachable!()
    }

    fn close(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

struct Outgoing {
    msg: WireMessage,
    delay: Duration,
    child: StageId,
}

/// Per-peer sender used when communication overlaps compute.
struct SenderThread {
    tx: Sender<Outgoing>,
    handle: JoinHandle<Result<BTreeMap<String, Tally>, RuntimeError>>,
}

impl SenderThread {
    fn spawn(mut link: Link) -> Self {
        let (tx, rx) = mpsc::channel::<Outgoing>();
        let handle = thread::spawn(move || {
            let mut times: BTreeMap<String, Tally> = BTreeMap::new();
            for out in rx {
                let start = Instant::now();
                run_until(start + out.delay);
                link.send(&out.msg)?;
                times
                    .entry(out.child.0.to_string())
                    .or_default()
                    .add(start.elapsed().as_secs_f64());
            }
            link.close();
            Ok(times)
        });
        SenderThread { tx, handle }
    }
}

struct DeviceLoop {
    plan: ResolvedPlan,
    device: usize,
    backoff: Backoff,
    kernels: Vec<Option<CalibratedKernel>>,
    links: BTreeMap<String, Link>,
    senders: BTreeMap<String, SenderThread>,
    coordinator: Link,
    metrics: WorkerMetrics,
    hops: BTreeMap<u64, u64>,
}

impl DeviceLoop {
    fn new(plan: ResolvedPlan, device: usize, backoff: Backoff) -> Self {
        let kernels = plan
            .hierarchy
            .stages()
            .iter()
            .map(|s| {
                (plan.partition.device_of(s.id) == device)
                    .then(|| plan.kernel_for(s.id).calibrate())
            })
            .collect();
        let coordinator = Link::new(plan.plan.coordinator.clone(), backoff);
        DeviceLoop {
            plan,
            device,
            backoff,
            kernels,
            links: BTreeMap::new(),
            senders: BTreeMap::new(),
            coordinator,
            metrics: WorkerMetrics {
                device,
                ..Default::default()
            },
            hops: BTreeMap::new(),
        }
    }

    fn serve(mut self, rx: Receiver<Inbound>) -> Result<WorkerMetrics, RuntimeError> {
        log::debug!("device {} ready", self.device);
        let outcome = loop {
            match rx.recv() {
                Ok(Inbound::Frame(msg)) => {
                    if let Err(e) = self.handle_frame(msg) {
                        break Err(e);
                    }
                }
                Ok(Inbound::Shutdown) => break Ok(()),
                Ok(Inbound::Fatal(e)) => break Err(e),
                Err(_) => break Err(RuntimeError::Protocol("all inbound channels closed".into())),
            }
        };
        let flushed = self.flush_senders();
        if let Err(e) = outcome.and(flushed) {
            log::error!("device {} aborting: {e}", self.device);
            self.close();
            return Err(e);
        }
        self.metrics.hops = self.hops.iter().map(|(&f, &n)| [f, n]).collect();
        let json = serde_json::to_vec(&self.metrics).expect("metrics serialize");
        let sent = self
            .coordinator
            .send(&WireMessage::metrics(self.device as u16, json));
        self.close();
        sent.map(|_| self.metrics)
    }

    fn handle_frame(&mut self, msg: WireMessage) -> Result<(), RuntimeError> {
        let leaf = StageId(msg.leaf.ok_or(crate::wire::WireError::MissingLeaf)?);
        if leaf.index() >= self.plan.hierarchy.len() {
            return Err(RuntimeError::Protocol(format!("unknown leaf {}", leaf.0)));
        }
        let path = self.plan.hierarchy.path_to(leaf);
        let start = path
            .iter()
            .position(|s| s.0 == msg.stage_id)
            .ok_or_else(|| {
                RuntimeError::Protocol(format!(
                    "stage {} is not on the path to {}",
                    msg.stage_id, leaf.0
                ))
            })?;
        for k in start..path.len() {
            let stage = path[k];
            let kernel = self.kernels[stage.index()].as_mut().ok_or_else(|| {
                RuntimeError::Protocol(format!(
                    "stage {} is not hosted on device {}",
                    stage.0, self.device
                ))
            })?;
            let t = kernel.time();
            self.metrics.busy_s += t;
            self.metrics
                .stage_time_s
                .entry(stage.0.to_string())
                .or_default()
                .add(t);
            if stage == leaf {
                *self.hops.entry(msg.frame_id).or_default() += 1;
                return self
                    .coordinator
                    .send(&WireMessage::result(msg.frame_id, leaf.0));
            }
            let next = path[k + 1];
            if self.plan.partition.device_of(next) != self.device {
                *self.hops.entry(msg.frame_id).or_default() += 1;
                return self.forward(msg.frame_id, next, leaf);
            }
        }
        unreachable!("path ends at its leaf")
    }

    fn forward(
        &mut self,
        frame_id: u64,
        child: StageId,
        leaf: StageId,
    ) -> Result<(), RuntimeError> {
        let out = Outgoing {
            msg: WireMessage::frame(
                frame_id,
                child.0,
                leaf.0,
                vec![0u8; self.plan.plan.payload_bytes as usize],
            ),
            delay: if self.plan.plan.emulate_transfers {
                Duration::from_secs_f64(self.plan.hierarchy.stage(child).transfer_s)
            } else {
                Duration::ZERO
            },
            child,
        };
        let endpoint = self.plan.endpoint_of(child).to_string();
        match self.plan.plan.comm_mode {
            CommMode::ModelFaithful => {
                let start = Instant::now();
                run_until(start + out.delay);
                let backoff = self.backoff;
                self.links
                    .entry(endpoint.clone())
                    .or_insert_with(|| Link::new(endpoint, backoff))
                    .send(&out.msg)?;
                let t = start.elapsed().as_secs_f64();
                self.metrics.busy_s += t;
                self.metrics
                    .send_time_s
                    .entry(child.0.to_string())
                    .or_default()
                    .add(t);
                Ok(())
            }
            CommMode::Overlapped => {
                let backoff = self.backoff;
                let sender = self
                    .senders
                    .entry(endpoint.clone())
                    .or_insert_with(|| SenderThread::spawn(Link::new(endpoint, backoff)));
                sender
                    .tx
                    .send(out)
                    .map_err(|_| RuntimeError::Protocol("sender thread exited early".into()))
            }
        }
    }

    fn flush_senders(&mut self) -> Result<(), RuntimeError> {
        let mut first_err = Ok(());
        for (endpoint, s) in std::mem::take(&mut self.senders) {
            drop(s.tx);
            match s.handle.join() {
                Ok(Ok(times)) => {
                    for (child, t) in times {
                        self.metrics.send_time_s.entry(child).or_default().merge(t);
                    }
                }
                Ok(Err(e)) => first_err = first_err.and(Err(e)),
                Err(_) => {
                    first_err = first_err.and(Err(RuntimeError::Protocol(format!(
                        "sender to {endpoint} panicked"
                    ))))
                }
            }
        }
        first_err
    }

    fn close(&mut self) {
        for link in self.links.values_mut() {
            link.close();
        }
        self.coordinator.close();
    }
}
