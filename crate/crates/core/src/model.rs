//! Closed-form pipeline timing.
//!
//! Processing `F` frames through a pipeline that spans `N` devices takes
//!
//! ```text
//! P(F) = (F + N - 1) * (M * Λ) + F * (H * τ)
//! ```
//!
//! where `M * Λ` is the per-frame work of the busiest device and `H * τ` the
//! expected per-frame communication. Throughput is `F / P(F)`, which tends to
//! `1 / (M * Λ + H * τ)` as `F` grows.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::hierarchy::{depth, Hierarchy, UsageRates};
use crate::partition::{Partition, PartitionEval};

/// Frame count for a pipeline estimate. `Steady` is the `F -> ∞` limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Frames {
    Finite(u64),
    Steady,
}

impl Frames {
    pub fn finite(self) -> Option<u64> {
        match self {
            Frames::Finite(f) => Some(f),
            Frames::Steady => None,
        }
    }
}

impl Default for Frames {
    fn default() -> Self {
        Frames::Finite(1000)
    }
}

impl fmt::Display for Frames {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frames::Finite(n) => write!(f, "{n}"),
            Frames::Steady => f.write_str("steady"),
        }
    }
}

impl std::str::FromStr for Frames {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "steady" | "inf" | "infinity" => Ok(Frames::Steady),
            _ => s
                .parse::<u64>()
                .map(Frames::Finite)
                .map_err(|_| format!("expected a frame count or \"steady\", got {s:?}")),
        }
    }
}

impl Serialize for Frames {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Frames::Finite(n) => serializer.serialize_u64(*n),
            Frames::Steady => serializer.serialize_str("steady"),
        }
    }
}

impl<'de> Deserialize<'de> for Frames {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct FramesVisitor;
        impl Visitor<'_> for FramesVisitor {
            type Value = Frames;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a frame count or \"steady\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Frames, E> {
                Ok(Frames::Finite(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Frames, E> {
                u64::try_from(v).map(Frames::Finite).map_err(E::custom)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Frames, E> {
                v.parse().map_err(E::custom)
            }
        }
        deserializer.deserialize_any(FramesVisitor)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(
        "processing time is undefined for an unbounded frame count; use the steady-state estimate"
    )]
    UnboundedFrames,
    #[error("frame count must be at least 1")]
    ZeroFrames,
    #[error("per-frame time is zero, throughput is unbounded")]
    ZeroTime,
    #[error("baseline throughput must be positive")]
    ZeroBaseline,
    #[error("invalid model parameters: {0}")]
    Invalid(String),
}

/// Pipeline throughput for a bottleneck load `work_s` and per-frame communication `comm_s`.
///
/// This is the single evaluation routine shared by partition scoring and
/// [`estimate_throughput`], so both give bit-identical values.
pub fn pipeline_throughput(work_s: f64, comm_s: f64, devices: usize, frames: Frames) -> f64 {
    match frames {
        // F / ((F + N - 1)·w + F·c), divided through by F so that N = 1
        // yields exactly 1 / (w + c) and the value is monotone in F.
        Frames::Finite(f) => {
            let fill = (devices as f64 - 1.0) / f as f64;
            1.0 / ((1.0 + fill) * work_s + comm_s)
        }
        Frames::Steady => 1.0 / (work_s + comm_s),
    }
}

/// Inputs of the pipeline timing model.
///
/// `work_s` (`M·Λ`) and `comm_s` (`H·τ`) are stored directly; the individual
/// factors are kept for reporting measured values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub frames: Frames,
    /// Pipeline devices `N`.
    pub devices: usize,
    /// Average stage processing seconds `Λ`.
    pub lambda_s: f64,
    /// Average per-cut communication seconds `τ`.
    pub tau_s: f64,
    /// Maximum hierarchy depth `K`.
    pub depth: usize,
    /// Average edge cuts per root-leaf traversal `H`.
    pub cuts: f64,
    /// Average stages run back to back on one device `M`.
    pub sequential: f64,
    /// `M·Λ`.
    pub work_s: f64,
    /// `H·τ`.
    pub comm_s: f64,
}

impl ModelParams {
    pub fn new(
        frames: Frames,
        devices: usize,
        lambda_s: f64,
        sequential: f64,
        tau_s: f64,
        cuts: f64,
        depth: usize,
    ) -> Result<Self, ModelError> {
        let p = ModelParams {
            frames,
            devices,
            lambda_s,
            tau_s,
            depth,
            cuts,
            sequential,
            work_s: sequential * lambda_s,
            comm_s: cuts * tau_s,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.to_string()));
        if self.devices == 0 {
            return bad("N must be at least 1");
        }
        if self.frames == Frames::Finite(0) {
            return Err(ModelError::ZeroFrames);
        }
        for (name, v) in [("Λ", self.lambda_s), ("τ", self.tau_s), ("H", self.cuts)] {
            if v < 0.0 || !v.is_finite() {
                return bad(&format!(
                    "{name} must be a finite nonnegative number, got {v}"
                ));
            }
        }
        if self.sequential < 1.0 || !self.sequential.is_finite() {
            return bad("M must be at least 1");
        }
        if self.depth == 0 {
            return bad("K must be at least 1");
        }
        if self.cuts > (self.depth - 1) as f64 + 1e-9 {
            return bad("H cannot exceed K - 1");
        }
        Ok(())
    }

    pub fn with_frames(&self, frames: Frames) -> Self {
        ModelParams {
            frames,
            ..self.clone()
        }
    }
}

/// Total seconds to process `F` frames: `(F + N - 1)·MΛ + F·Hτ`.
pub fn processing_time(params: &ModelParams) -> Result<f64, ModelError> {
    match params.frames {
        Frames::Steady => Err(ModelError::UnboundedFrames),
        Frames::Finite(0) => Err(ModelError::ZeroFrames),
        Frames::Finite(f) => {
            let f = f as f64;
            Ok((f + params.devices as f64 - 1.0) * params.work_s + f * params.comm_s)
        }
    }
}

/// Estimated frames per second; the steady-state limit when frames are unbounded.
pub fn estimate_throughput(params: &ModelParams) -> Result<f64, ModelError> {
    if params.work_s + params.comm_s <= 0.0 {
        return Err(ModelError::ZeroTime);
    }
    if params.frames == Frames::Finite(0) {
        return Err(ModelError::ZeroFrames);
    }
    Ok(pipeline_throughput(
        params.work_s,
        params.comm_s,
        params.devices,
        params.frames,
    ))
}

/// `1 / (MΛ + Hτ)`.
pub fn steady_state_throughput(params: &ModelParams) -> Result<f64, ModelError> {
    estimate_throughput(&params.with_frames(Frames::Steady))
}

/// Model parameters whose products reproduce a partition's score exactly.
///
/// `M·Λ` is the bottleneck load and `H·τ` the expected communication cost.
/// `H` is the expected number of cut edges a frame crosses and `M` the
/// expected number of stages a frame runs on the bottleneck device (at least 1);
/// `Λ` and `τ` are the quotients.
pub fn params_from_partition(
    hierarchy: &Hierarchy,
    rates: &UsageRates,
    partition: &Partition,
    eval: &PartitionEval,
    frames: Frames,
) -> ModelParams {
    let cuts: f64 = eval.cut_edges.iter().map(|&(_, c)| rates.get(c)).sum();
    let bottleneck = eval
        .device_loads
        .iter()
        .enumerate()
        .fold(
            (0, f64::MIN),
            |best, (j, &l)| if l > best.1 { (j, l) } else { best },
        )
        .0;
    let visits: f64 = partition.stages_on(bottleneck).map(|s| rates.get(s)).sum();
    let sequential = visits.max(1.0);
    ModelParams {
        frames,
        devices: eval.devices_used,
        lambda_s: eval.max_load / sequential,
        tau_s: if cuts > 0.0 {
            eval.comm_cost / cuts
        } else {
            0.0
        },
        depth: depth(hierarchy),
        cuts,
        sequential,
        work_s: eval.max_load,
        comm_s: eval.comm_cost,
    }
}

/// Ratio of parallel to single-device throughput.
pub fn speedup(parallel_fps: f64, single_fps: f64) -> Result<f64, ModelError> {
    if single_fps <= 0.0 || single_fps.is_nan() {
        return Err(ModelError::ZeroBaseline);
    }
    Ok(parallel_fps / single_fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(f: u64, n: usize, m: f64, lambda: f64, h: f64, tau: f64) -> ModelParams {
        ModelParams::new(Frames::Finite(f), n, lambda, m, tau, h, 4).unwrap()
    }

    #[test]
    fn one_frame_one_stage() {
        let p = params(1, 1, 1.0, 0.1, 0.0, 0.0);
        assert!((processing_time(&p).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn processing_time_arithmetic() {
        let p = params(100, 3, 1.0, 0.01, 1.0, 0.002);
        assert!((processing_time(&p).unwrap() - 1.22).abs() < 1e-12);
        let p = params(10, 2, 2.0, 0.05, 0.0, 0.0);
        assert!((processing_time(&p).unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn unbounded_frames_have_no_processing_time() {
        let p = params(1, 1, 1.0, 0.1, 0.0, 0.0).with_frames(Frames::Steady);
        assert_eq!(processing_time(&p), Err(ModelError::UnboundedFrames));
        assert!((estimate_throughput(&p).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn steady_state_values() {
        let p = params(1, 1, 1.0, 0.05, 0.0, 0.0);
        assert!((steady_state_throughput(&p).unwrap() - 20.0).abs() < 1e-12);
        let p = params(1, 1, 1.0, 0.095, 0.0, 0.0);
        assert!((steady_state_throughput(&p).unwrap() - 10.526).abs() < 1e-3);
    }

    #[test]
    fn zero_time_is_an_error() {
        let p = params(10, 1, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(estimate_throughput(&p), Err(ModelError::ZeroTime));
    }

    #[test]
    fn doubling_tau_lowers_throughput() {
        let a = params(100, 3, 1.0, 0.01, 1.0, 0.002);
        let b = params(100, 3, 1.0, 0.01, 1.0, 0.004);
        assert!(estimate_throughput(&b).unwrap() < estimate_throughput(&a).unwrap());
    }

    #[test]
    fn speedups() {
        assert!((speedup(20.00, 10.55).unwrap() - 1.90).abs() < 0.005);
        assert!((speedup(30.30, 10.55).unwrap() - 2.87).abs() < 0.005);
        assert_eq!(speedup(7.0, 7.0).unwrap(), 1.0);
        assert_eq!(speedup(7.0, 0.0), Err(ModelError::ZeroBaseline));
    }

    #[test]
    fn parameter_checks() {
        assert!(ModelParams::new(Frames::Finite(1), 0, 0.1, 1.0, 0.0, 0.0, 1).is_err());
        assert!(ModelParams::new(Frames::Finite(1), 1, 0.1, 0.5, 0.0, 0.0, 1).is_err());
        assert!(ModelParams::new(Frames::Finite(1), 1, 0.1, 1.0, 0.1, 2.0, 2).is_err());
        assert_eq!(
            ModelParams::new(Frames::Finite(0), 1, 0.1, 1.0, 0.0, 0.0, 1),
            Err(ModelError::ZeroFrames)
        );
    }

    #[test]
    fn frames_serde() {
        assert_eq!(
            serde_json::to_string(&Frames::Steady).unwrap(),
            "\"steady\""
        );
        assert_eq!(
            serde_json::from_str::<Frames>("12").unwrap(),
            Frames::Finite(12)
        );
        assert_eq!("steady".parse::<Frames>().unwrap(), Frames::Steady);
    }
}
