#![allow(dead_code)]

use hpipe_core::hierarchy::{HierarchyConfig, StageConfig};
use hpipe_core::model::Frames;
use hpipe_core::{compute_rates, evaluate_partition, Hierarchy, Partition};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random tree with `n` stages: latencies in [1, 100] ms, transfers in
/// [0, 50] ms, random leaf weights. Non-root ids are shuffled so parents do
/// not always precede their children.
pub fn random_hierarchy(rng: &mut ChaCha8Rng, n: usize) -> Hierarchy {
    let mut ids: Vec<u32> = (1..n as u32).collect();
    ids.shuffle(rng);
    let mut order = vec![0u32];
    order.extend(ids);
    let mut children = vec![Vec::new(); n];
    for pos in 1..n {
        let parent = order[rng.gen_range(0..pos)];
        children[parent as usize].push(order[pos]);
    }
    let stages = (0..n as u32)
        .map(|id| StageConfig {
            id,
            latency_s: rng.gen_range(0.001..=0.100),
            transfer_s: if id == 0 {
                0.0
            } else {
                rng.gen_range(0.0..=0.050)
            },
            children: children[id as usize].clone(),
        })
        .collect::<Vec<_>>();
    let leaves: Vec<u32> = (0..n as u32)
        .filter(|&i| children[i as usize].is_empty())
        .collect();
    let weights: Vec<f64> = leaves.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let probs = leaves
        .iter()
        .zip(&weights)
        .map(|(l, w)| (l.to_string(), w / total))
        .collect();
    Hierarchy::from_config(&HierarchyConfig {
        stages,
        leaf_probabilities: Some(probs),
    })
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Best partition by brute force over every device-labeled assignment,
/// without pruning. Ties: smaller communication, then smaller canonical
/// assignment.
pub fn brute_force_best(h: &Hierarchy, devices: usize, frames: Frames) -> (Vec<usize>, f64, f64) {
    let rates = compute_rates(h);
    let n = h.len();
    let total = devices.pow(n as u32);
    let mut best: Option<(Vec<usize>, f64, f64)> = None;
    for code in 0..total {
        let mut c = code;
        let assignment: Vec<usize> = (0..n)
            .map(|_| {
                let d = c % devices;
                c /= devices;
                d
            })
            .collect();
        let p = Partition::new(assignment, devices).unwrap();
        let e = evaluate_partition(h, &rates, &p, frames).unwrap();
        let canon = p.canonical().assignment().to_vec();
        let better = match &best {
            None => true,
            Some((a, t, b)) => {
                e.estimated_throughput > *t
                    || (e.estimated_throughput == *t
                        && (e.comm_cost < *b || (e.comm_cost == *b && canon < *a)))
            }
        };
        if better {
            best = Some((canon, e.estimated_throughput, e.comm_cost));
        }
    }
    best.unwrap()
}

/// Stirling numbers of the second kind from the explicit alternating sum.
pub fn stirling2(n: u32, k: u32) -> i128 {
    let binom = |n: u32, r: u32| -> i128 {
        (0..r).fold(1i128, |acc, i| acc * (n - i) as i128 / (i + 1) as i128)
    };
    let fact: i128 = (1..=k as i128).product();
    let sum: i128 = (0..=k)
        .map(|j| {
            let term = binom(k, j) * ((k - j) as i128).pow(n);
            if j % 2 == 0 {
                term
            } else {
                -term
            }
        })
        .sum();
    sum / fact
}
