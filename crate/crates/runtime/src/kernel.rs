//! Synthetic stage kernels standing in for small-network inference.
//!
//! `SpinCalibrated` and `Matmul` burn CPU; `Timed` sleeps until shortly
//! before its deadline and spins the remainder, so co-located workers on a
//! host with fewer cores than workers still overlap.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    #[default]
    SpinCalibrated,
    Matmul,
    Timed,
}

impl std::str::FromStr for KernelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spin-calibrated" | "spin" => Ok(KernelKind::SpinCalibrated),
            "matmul" => Ok(KernelKind::Matmul),
            "timed" => Ok(KernelKind::Timed),
            _ => Err(format!(
                "unknown kernel kind {s:?}, expected spin-calibrated, matmul or timed"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageKernel {
    pub target_latency_s: f64,
    /// Bytes forwarded to a child stage on another device.
    pub payload_out: u32,
    pub kind: KernelKind,
}

enum Work {
    Spin {
        iterations: u64,
    },
    Matmul {
        n: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
    Timed,
}

/// A kernel tuned to its target latency on this host.
pub struct CalibratedKernel {
    spec: StageKernel,
    work: Work,
}

const TOLERANCE: f64 = 0.02;
const ROUNDS: usize = 12;
const SLEEP_MARGIN: Duration = Duration::from_micros(300);

impl StageKernel {
    pub fn new(target_latency_s: f64, kind: KernelKind) -> Self {
        StageKernel {
            target_latency_s,
            payload_out: 0,
            kind,
        }
    }

    pub fn calibrate(&self) -> CalibratedKernel {
        let target = self.target_latency_s.max(0.0);
        let work = match self.kind {
            KernelKind::Timed => Work::Timed,
            KernelKind::SpinCalibrated => Work::Spin {
                iterations: calibrate_spin(target),
            },
            KernelKind::Matmul => {
                let n = calibrate_matmul(target);
                Work::Matmul {
                    n,
                    a: filled(n, 1.0),
                    b: filled(n, 0.5),
                    c: vec![0.0; n * n],
                }
            }
        };
        CalibratedKernel { spec: *self, work }
    }
}

impl CalibratedKernel {
    pub fn spec(&self) -> &StageKernel {
        &self.spec
    }

    pub fn run(&mut self) {
        match &mut self.work {
            Work::Spin { iterations } => {
                spin(*iterations);
            }
            Work::Matmul { n, a, b, c } => matmul(*n, a, b, c),
            Work::Timed => run_until(Instant::now() + secs(self.spec.target_latency_s)),
        }
    }

    /// Wall-clock duration of one execution.
    pub fn time(&mut self) -> f64 {
        let start = Instant::now();
        self.run();
        start.elapsed().as_secs_f64()
    }
}

/// Median duration over `repetitions` runs (at least 3) after one warm-up run.
pub fn profile_stage(kernel: &mut CalibratedKernel, repetitions: usize) -> f64 {
    kernel.run();
    let samples: Vec<f64> = (0..repetitions.max(3)).map(|_| kernel.time()).collect();
    median(samples)
}

pub fn median(mut samples: Vec<f64>) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    }
}

/// Sleep to within a short margin of `deadline`, then spin.
pub fn run_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now + SLEEP_MARGIN {
        std::thread::sleep(deadline - now - SLEEP_MARGIN);
    }
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

fn spin(iterations: u64) -> u64 {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..black_box(iterations) {
        x = (x.rotate_left(7) ^ i).wrapping_mul(0x0000_0100_0000_01b3);
    }
    black_box(x)
}

fn timed(mut f: impl FnMut()) -> f64 {
    let runs: Vec<f64> = (0..7)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    median(runs)
}

fn calibrate_spin(target: f64) -> u64 {
    if target == 0.0 {
        return 0;
    }
    let mut iterations = 1u64 << 10;
    let mut t = timed(|| {
        spin(iterations);
    });
    while t < 1e-3 && iterations < 1 << 40 {
        iterations *= 4;
        t = timed(|| {
            spin(iterations);
        });
    }
    let (mut lo, mut hi) = (0u64, u64::MAX);
    for _ in 0..ROUNDS {
        if hi.saturating_sub(lo) <= 1 {
            break;
        }
        let proposal = (iterations as f64 * target / t.max(1e-9)) as u64;
        iterations = if proposal > lo && proposal < hi {
            proposal
        } else {
            lo + (hi - lo) / 2
        };
        t = timed(|| {
            spin(iterations);
        });
        if (t / target - 1.0).abs() <= TOLERANCE {
            break;
        }
        if t < target {
            lo = iterations;
        } else {
            hi = iterations;
        }
    }
    iterations
}

fn filled(n: usize, v: f64) -> Vec<f64> {
    (0..n * n).map(|i| v + (i % 7) as f64 * 1e-3).collect()
}

fn matmul(n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    black_box(&c);
}

fn calibrate_matmul(target: f64) -> usize {
    let time_n = |n: usize| {
        let (a, b, mut c) = (filled(n, 1.0), filled(n, 0.5), vec![0.0; n * n]);
        timed(|| matmul(n, &a, &b, &mut c))
    };
    let mut n = 16usize;
    let mut t = time_n(n);
    for _ in 0..ROUNDS {
        let next = ((n as f64) * (target / t.max(1e-9)).cbrt())
            .round()
            .clamp(1.0, 2048.0) as usize;
        if next == n {
            break;
        }
        n = next;
        t = time_n(n);
        if (t / target - 1.0).abs() <= TOLERANCE {
            break;
        }
    }
    n
}
