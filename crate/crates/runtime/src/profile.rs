//! Measuring stage latencies and link transfer times on the live host.

use std::time::Instant;

use hpipe_core::Hierarchy;

use crate::kernel::{median, profile_stage, KernelKind, StageKernel};
use crate::net::{connect_with_backoff, Backoff};
use crate::wire::{MsgType, WireMessage};
use crate::RuntimeError;

/// One-way transfer estimate to `endpoint` for `payload_bytes`: median RTT / 2
/// over `repetitions` PING/PONG exchanges after one warm-up exchange.
pub fn profile_link(
    endpoint: &str,
    payload_bytes: usize,
    repetitions: usize,
) -> Result<f64, RuntimeError> {
    let mut stream = connect_with_backoff(endpoint, Backoff::default())?;
    let payload = vec![0x5a; payload_bytes];
    let mut round_trip = |seq: u64| -> Result<f64, RuntimeError> {
        let start = Instant::now();
        WireMessage::ping(seq, payload.clone()).write_to(&mut stream)?;
        match WireMessage::read_from(&mut stream)? {
            Some(m)
                if m.msg_type == MsgType::ProfilePong
                    && m.frame_id == seq
                    && m.payload.len() == payload_bytes =>
            {
                Ok(start.elapsed().as_secs_f64())
            }
            other => Err(RuntimeError::Protocol(format!(
                "expected PONG {seq}, got {:?}",
                other.map(|m| m.msg_type)
            ))),
        }
    };
    round_trip(0)?;
    let rtts = (1..=repetitions.max(1) as u64)
        .map(&mut round_trip)
        .collect::<Result<Vec<_>, _>>()?;
    let _ = stream.shutdown(std::net::Shutdown::Both);
    Ok(median(rtts) / 2.0)
}

/// Copy of `hierarchy` whose latencies are the profiled medians of kernels
/// calibrated to the configured latencies.
pub fn profile_hierarchy(hierarchy: &Hierarchy, kind: KernelKind, repetitions: usize) -> Hierarchy {
    let measured: Vec<f64> = hierarchy
        .stages()
        .iter()
        .map(|s| {
            profile_stage(
                &mut StageKernel::new(s.latency_s, kind).calibrate(),
                repetitions,
            )
        })
        .collect();
    hierarchy.with_latencies(&measured)
}
