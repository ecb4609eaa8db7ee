#![allow(dead_code)]

use std::net::TcpListener;
use std::sync::{Mutex, MutexGuard};
use std::thread::{self, JoinHandle};

use hpipe_core::{Hierarchy, Partition, WorkloadSpec};
use hpipe_runtime::{
    Coordinator, CoordinatorOptions, DeploymentPlan, RunReport, RuntimeError, Worker, WorkerMetrics,
};

/// Live tests share one host; run them one at a time.
pub fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct Cluster {
    pub plan: DeploymentPlan,
    pub coordinator: Coordinator,
    pub workers: Vec<JoinHandle<Result<WorkerMetrics, RuntimeError>>>,
}

fn ephemeral() -> TcpListener {
    TcpListener::bind("127.0.0.1:0").unwrap()
}

/// In-process workers on ephemeral ports; `configure` edits the plan before start.
pub fn launch(
    h: &Hierarchy,
    p: &Partition,
    options: CoordinatorOptions,
    configure: impl FnOnce(&mut DeploymentPlan),
) -> Cluster {
    let listeners: Vec<TcpListener> = (0..p.device_count()).map(|_| ephemeral()).collect();
    let coord = ephemeral();
    let endpoints = listeners
        .iter()
        .map(|l| l.local_addr().unwrap().to_string())
        .collect();
    let mut plan =
        DeploymentPlan::new(h, p, endpoints, coord.local_addr().unwrap().to_string()).unwrap();
    configure(&mut plan);
    let workers = listeners
        .into_iter()
        .enumerate()
        .map(|(j, l)| {
            let w = Worker::from_listener(l, plan.resolve().unwrap(), j).unwrap();
            thread::spawn(move || w.run())
        })
        .collect();
    Cluster {
        plan,
        coordinator: Coordinator::from_listener(coord, options),
        workers,
    }
}

impl Cluster {
    pub fn run(self, spec: &WorkloadSpec) -> (RunReport, Vec<WorkerMetrics>) {
        let report = self.coordinator.run(&self.plan, spec).unwrap();
        let metrics = self
            .workers
            .into_iter()
            .map(|w| w.join().unwrap().unwrap())
            .collect();
        (report, metrics)
    }
}
