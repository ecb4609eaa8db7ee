mod common;

use std::time::Instant;

use common::{brute_force_best, random_hierarchy, rng, stirling2};
use hpipe_core::model::Frames;
use hpipe_core::partition::SetPartitions;
use hpipe_core::search::DEFAULT_BUDGET;
use hpipe_core::{
    compute_rates, enumerate_partitions, evaluate_partition, heuristic_partition, partition_count,
    select_best, Partition, SearchMethod, SearchOptions,
};
use rand::Rng;

#[test]
fn stirling_oracle_values() {
    assert_eq!(stirling2(3, 1) + stirling2(3, 2), 4);
    assert_eq!(stirling2(6, 1) + stirling2(6, 2) + stirling2(6, 3), 122);
    assert_eq!(stirling2(6, 2), 31);
    assert_eq!(stirling2(6, 3), 90);
}

#[test]
fn enumeration_counts_match_stirling_sums() {
    for n in 1..=10u32 {
        for devices in 1..=4u32 {
            let expected: i128 = (1..=devices.min(n)).map(|k| stirling2(n, k)).sum();
            let streamed = enumerate_partitions(n as usize, devices as usize).count() as i128;
            assert_eq!(streamed, expected, "n={n} N={devices}");
            assert_eq!(
                partition_count(n as usize, devices as usize) as i128,
                expected
            );
        }
    }
}

#[test]
fn enumeration_is_canonical_and_duplicate_free() {
    let all: Vec<Vec<usize>> = SetPartitions::new(7, 3).collect();
    let mut sorted = all.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), all.len());
    assert_eq!(sorted, all, "lexicographic order");
    for a in &all {
        let p = Partition::new(a.clone(), 3).unwrap();
        assert!(p.is_canonical());
        assert!(p.devices_used() <= 3);
    }
}

#[test]
fn exhaustive_search_matches_unpruned_oracle() {
    let mut r = rng(0x5eed);
    for case in 0..60 {
        let n = r.gen_range(3..=8);
        let h = random_hierarchy(&mut r, n);
        let rates = compute_rates(&h);
        for devices in 1..=3 {
            for frames in [Frames::Finite(1000), Frames::Steady] {
                let (assignment, t, b) = brute_force_best(&h, devices, frames);
                let got =
                    select_best(&h, &rates, devices, frames, &SearchOptions::default()).unwrap();
                assert_eq!(got.eval.estimated_throughput, t, "case {case} N={devices}");
                assert_eq!(got.eval.comm_cost, b, "case {case} N={devices}");
                assert_eq!(
                    got.partition.assignment(),
                    assignment.as_slice(),
                    "case {case} N={devices}"
                );
            }
        }
    }
}

#[test]
fn thread_count_does_not_change_the_winner() {
    let mut r = rng(11);
    for _ in 0..10 {
        let h = random_hierarchy(&mut r, 10);
        let rates = compute_rates(&h);
        let one = SearchOptions {
            threads: Some(1),
            ..SearchOptions::default()
        };
        let four = SearchOptions {
            threads: Some(4),
            ..SearchOptions::default()
        };
        let a = select_best(&h, &rates, 3, Frames::Finite(500), &one).unwrap();
        let b = select_best(&h, &rates, 3, Frames::Finite(500), &four).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn scaling_costs_keeps_the_argmax() {
    let mut r = rng(99);
    for _ in 0..30 {
        let n = r.gen_range(3..=7);
        let h = random_hierarchy(&mut r, n);
        let k = r.gen_range(0.25..4.0);
        let scaled = h.scaled(k, k);
        let (rates, srates) = (compute_rates(&h), compute_rates(&scaled));
        let a = select_best(&h, &rates, 3, Frames::Steady, &SearchOptions::default()).unwrap();
        let b = select_best(
            &scaled,
            &srates,
            3,
            Frames::Steady,
            &SearchOptions::default(),
        )
        .unwrap();
        let e = evaluate_partition(&scaled, &srates, &a.partition, Frames::Steady).unwrap();
        assert!((e.max_load - k * a.eval.max_load).abs() < 1e-12);
        assert!((e.comm_cost - k * a.eval.comm_cost).abs() < 1e-12);
        // The original winner stays optimal after scaling.
        let rel = (e.estimated_throughput - b.eval.estimated_throughput).abs()
            / b.eval.estimated_throughput;
        assert!(rel < 1e-12, "{rel}");
    }
}

#[test]
fn more_devices_never_hurt() {
    let mut r = rng(4);
    for _ in 0..40 {
        let n = r.gen_range(2..=8);
        let h = random_hierarchy(&mut r, n);
        let rates = compute_rates(&h);
        for frames in [Frames::Finite(100), Frames::Steady] {
            let mut prev = 0.0;
            for devices in 1..=4 {
                let t = select_best(&h, &rates, devices, frames, &SearchOptions::default())
                    .unwrap()
                    .eval
                    .estimated_throughput;
                assert!(t >= prev, "N={devices}: {t} < {prev}");
                prev = t;
            }
        }
    }
}

#[test]
fn cut_edges_empty_iff_single_group() {
    let mut r = rng(8);
    for _ in 0..20 {
        let h = random_hierarchy(&mut r, 6);
        let rates = compute_rates(&h);
        for p in enumerate_partitions(6, 3) {
            let e = evaluate_partition(&h, &rates, &p, Frames::Steady).unwrap();
            assert_eq!(e.cut_edges.is_empty(), p.devices_used() == 1);
            if p.devices_used() == 1 {
                assert_eq!(e.comm_cost, 0.0);
            }
            assert!(e.imbalance >= 1.0);
            assert_eq!(
                e.max_load,
                e.device_loads.iter().copied().fold(0.0, f64::max)
            );
        }
    }
}

#[test]
fn heuristic_is_close_to_exhaustive() {
    let mut r = rng(2024);
    let mut worst: f64 = 1.0;
    for _ in 0..100 {
        let n = r.gen_range(3..=8);
        let h = random_hierarchy(&mut r, n);
        let rates = compute_rates(&h);
        for devices in 2..=3 {
            let exact = select_best(
                &h,
                &rates,
                devices,
                Frames::Finite(1000),
                &SearchOptions::default(),
            )
            .unwrap();
            let approx = heuristic_partition(&h, &rates, devices, Frames::Finite(1000)).unwrap();
            assert_eq!(approx.method, SearchMethod::Heuristic);
            assert!(approx.partition.is_canonical());
            let ratio = approx.eval.estimated_throughput / exact.eval.estimated_throughput;
            assert!(ratio <= 1.0 + 1e-12);
            worst = worst.min(ratio);
        }
    }
    assert!(worst >= 0.9, "worst heuristic ratio {worst}");
}

#[test]
fn heuristic_is_deterministic_and_fast_on_twenty_stages() {
    let mut r = rng(20);
    let h = random_hierarchy(&mut r, 20);
    let rates = compute_rates(&h);
    let start = Instant::now();
    let a = heuristic_partition(&h, &rates, 4, Frames::Finite(1000)).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let b = heuristic_partition(&h, &rates, 4, Frames::Finite(1000)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.partition.assignment().len(), 20);
    // 20 stages over 4 devices is far past the default budget.
    assert!(partition_count(20, 4) > DEFAULT_BUDGET as u128);
    let s = select_best(
        &h,
        &rates,
        4,
        Frames::Finite(1000),
        &SearchOptions::default(),
    )
    .unwrap();
    assert_eq!(s.method, SearchMethod::Heuristic);
}
