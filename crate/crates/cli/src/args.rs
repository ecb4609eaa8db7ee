use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hpipe_core::model::Frames;
use hpipe_core::CommMode;
use hpipe_runtime::KernelKind;

#[derive(Debug, Parser)]
#[command(
    name = "hpipe",
    version,
    about = "Partition, model, simulate and run pipelined stage hierarchies"
)]
pub struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Only report errors on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Seed for frame routing.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a hierarchy file; exit 1 listing every violation.
    Validate { hierarchy: PathBuf },
    /// Rate of use of every stage.
    Rates { hierarchy: PathBuf },
    /// Select the throughput-maximizing partition.
    Partition(PartitionArgs),
    /// Closed-form throughput estimates.
    Estimate(EstimateArgs),
    /// Discrete-event simulation of a partitioned pipeline.
    Simulate(SimulateArgs),
    /// Measure kernels and links on this host.
    #[command(subcommand)]
    Profile(ProfileCommand),
    /// Serve one device of a deployment plan until SHUTDOWN.
    Worker(WorkerArgs),
    /// Drive a live run across the workers of a plan.
    Coordinator(CoordinatorArgs),
    /// Model vs simulation vs live comparison table as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    pub hierarchy: PathBuf,
    #[arg(long, short = 'n')]
    pub devices: usize,
    /// Frame count, or `steady`.
    #[arg(long, short = 'f', default_value = "1000")]
    pub frames: Frames,
    /// Fall back to the local-search heuristic when the budget is exceeded.
    #[arg(long)]
    pub heuristic: bool,
    /// Largest number of partitions searched exhaustively.
    #[arg(long, default_value_t = hpipe_core::search::DEFAULT_BUDGET)]
    pub budget: u64,
    /// Search threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Print every canonical partition with its score.
    #[arg(long)]
    pub all: bool,
    /// Write a deployment plan for the selected partition.
    #[arg(long, value_name = "FILE")]
    pub emit_plan: Option<PathBuf>,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Coordinator port; device j listens on base + 1 + j (localhost).
    #[arg(long, default_value_t = 7400)]
    pub base_port: u16,
    /// Explicit device endpoints, comma separated, overriding --base-port.
    #[arg(long, value_delimiter = ',')]
    pub endpoints: Vec<String>,
    /// Coordinator endpoint used with --endpoints.
    #[arg(long)]
    pub coordinator_endpoint: Option<String>,
    #[arg(long, default_value = "spin-calibrated")]
    pub kernel: KernelKind,
    #[arg(long, default_value = "model-faithful")]
    pub comm_mode: CommMode,
    /// Hold each cut-edge send for the configured transfer time.
    #[arg(long)]
    pub emulate_transfers: bool,
    #[arg(long, default_value_t = 4096)]
    pub payload_bytes: u32,
}

#[derive(Debug, Args)]
pub struct PartitionSource {
    /// Partition document (`{"devices": [[...], ...]}`).
    #[arg(long, conflicts_with = "devices")]
    pub partition: Option<PathBuf>,
    /// Select the best partition over this many devices.
    #[arg(long, short = 'n')]
    pub devices: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Hierarchy to estimate; omit to give the parameters directly.
    pub hierarchy: Option<PathBuf>,
    #[arg(long, short = 'f', default_value = "1000")]
    pub frames: Frames,
    /// Largest device count in the table, or N for a parameter estimate.
    #[arg(long, short = 'n', default_value_t = 1)]
    pub devices: usize,
    /// Estimate this partition instead of the selected one.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Single-device throughput for the speedup column; defaults to the model's.
    #[arg(long)]
    pub baseline_fps: Option<f64>,
    /// Measured throughputs to express as speedups over --baseline-fps.
    #[arg(long, value_delimiter = ',', requires = "baseline_fps")]
    pub observed_fps: Vec<f64>,
    /// Λ in milliseconds.
    #[arg(long, requires_all = ["tau_ms", "depth"], conflicts_with = "hierarchy")]
    pub lambda_ms: Option<f64>,
    /// τ in milliseconds.
    #[arg(long)]
    pub tau_ms: Option<f64>,
    /// M, stages per frame on the busiest device.
    #[arg(long, default_value_t = 1.0)]
    pub sequential: f64,
    /// H, cut edges per frame.
    #[arg(long, default_value_t = 0.0)]
    pub cuts: f64,
    /// K, hierarchy depth.
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub hierarchy: PathBuf,
    #[command(flatten)]
    pub source: PartitionSource,
    #[arg(long, short = 'f', default_value_t = 1000)]
    pub frames: u64,
    #[arg(long, default_value = "model-faithful")]
    pub mode: CommMode,
    /// Fixed inter-arrival time; back-to-back when omitted.
    #[arg(long)]
    pub interval_ms: Option<f64>,
    /// Frames in flight; defaults to twice the device count.
    #[arg(long)]
    pub window: Option<usize>,
    /// Write the event log as newline-delimited JSON.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ProfileCommand {
    /// Median duration of a calibrated kernel.
    Stage {
        #[arg(long)]
        latency_ms: f64,
        #[arg(long, default_value = "spin-calibrated")]
        kind: KernelKind,
        #[arg(long, default_value_t = 9)]
        repetitions: usize,
    },
    /// Median one-way time to a running worker (RTT / 2).
    Link {
        #[arg(long)]
        endpoint: String,
        #[arg(long, default_value_t = 4096)]
        payload_bytes: usize,
        #[arg(long, default_value_t = 9)]
        repetitions: usize,
    },
    /// Re-measure every stage (and optionally the link) and print the updated hierarchy.
    Hierarchy {
        hierarchy: PathBuf,
        #[arg(long, default_value = "spin-calibrated")]
        kind: KernelKind,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Set every transfer time to the profiled link time to this worker.
        #[arg(long)]
        link: Option<String>,
        #[arg(long, default_value_t = 4096)]
        payload_bytes: usize,
    },
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    #[arg(long)]
    pub listen: String,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub device: usize,
}

#[derive(Debug, Args)]
pub struct CoordinatorArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub hierarchy: PathBuf,
    #[arg(long, short = 'f')]
    pub frames: u64,
    #[arg(long)]
    pub interval_ms: Option<f64>,
    /// Require a plan whose workers block on outbound transfers.
    #[arg(long)]
    pub faithful: bool,
    #[arg(long)]
    pub window: Option<usize>,
    /// Seconds to wait for the next RESULT.
    #[arg(long, default_value_t = 30.0)]
    pub timeout_s: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Scenario list (JSON array).
    #[arg(long, required_unless_present = "sweep")]
    pub scenarios: Option<PathBuf>,
    /// Use the built-in sweep over the bundled hierarchies.
    #[arg(long, conflicts_with = "scenarios")]
    pub sweep: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
}
