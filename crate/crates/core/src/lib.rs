//! Pipeline-parallel execution planning for hierarchical stage trees.
//!
//! * [`hierarchy`]: stage trees, validation and rates of use
//! * [`partition`] and [`search`]: assigning stages to devices
//! * [`model`]: closed-form pipeline throughput
//! * [`sim`]: discrete-event validation of the model

pub mod fixtures;
pub mod hierarchy;
pub mod model;
pub mod partition;
pub mod routing;
pub mod search;
pub mod sim;

pub use hierarchy::{
    compute_rates, depth, root_leaf_paths, validate, Hierarchy, HierarchyConfig, HierarchyError,
    Stage, StageId, UsageRates, ValidationReport, Violation,
};
pub use model::{
    estimate_throughput, params_from_partition, processing_time, speedup, steady_state_throughput,
    Frames, ModelError, ModelParams,
};
pub use partition::{
    enumerate_partitions, evaluate_partition, partition_count, workload_imbalance, Partition,
    PartitionDocument, PartitionError, PartitionEval,
};
pub use routing::FrameRouter;
pub use search::{heuristic_partition, select_best, SearchMethod, SearchOptions, Selection};
pub use sim::{
    compare_report, compare_to_model, simulate, simulate_with_trace, Arrival, CommMode,
    DeviationReport, LatencyStats, SimError, SimReport, TraceEvent, TraceKind, WorkloadSpec,
};
