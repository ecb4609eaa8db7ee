//! Live execution of a partitioned stage hierarchy across processes.
//!
//! Workers each own one device's stages and exchange length-prefixed
//! [`wire`] messages over TCP; the coordinator samples each frame's leaf with
//! the same router as the simulator, injects frames at the root's device
//! under a bounded in-flight window, and collects results and per-worker
//! metrics into a [`RunReport`].

pub mod coordinator;
pub mod kernel;
mod net;
pub mod plan;
pub mod profile;
pub mod wire;
pub mod worker;

use thiserror::Error;

pub use coordinator::{run_coordinator, Coordinator, CoordinatorOptions, RunReport};
pub use kernel::{profile_stage, CalibratedKernel, KernelKind, StageKernel};
pub use net::{connect_with_backoff, Backoff};
pub use plan::{DeploymentPlan, ResolvedPlan};
pub use profile::{profile_hierarchy, profile_link};
pub use wire::{MsgType, WireError, WireMessage};
pub use worker::{run_worker, Tally, Worker, WorkerMetrics};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{endpoint} unreachable after {attempts} attempts: {source}")]
    Unreachable {
        endpoint: String,
        attempts: u32,
        #[source]
        source: std::io::Error,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("no RESULT within {waited_s:.1} s ({}/{} frames complete)", partial.frames_completed, partial.frames_injected)]
    Timeout {
        waited_s: f64,
        partial: Box<RunReport>,
    },
    #[error(transparent)]
    Workload(#[from] hpipe_core::SimError),
}
