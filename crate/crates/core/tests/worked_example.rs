//! The CIFAR-10 walkthrough on the fitted stage profile.

use hpipe_core::fixtures;
use hpipe_core::model::Frames;
use hpipe_core::{
    compute_rates, evaluate_partition, select_best, workload_imbalance, Partition, SearchOptions,
    StageId,
};

fn groups(gs: &[&[u16]]) -> Vec<Vec<StageId>> {
    gs.iter()
        .map(|g| g.iter().map(|&s| StageId(s)).collect())
        .collect()
}

fn partition_d() -> Partition {
    Partition::from_groups(&groups(&[&[0], &[3, 4], &[1, 2, 5]]), 6, 3).unwrap()
}

fn partition_c() -> Partition {
    Partition::from_groups(&groups(&[&[0, 4], &[1, 3], &[2, 5]]), 6, 3).unwrap()
}

#[test]
fn dnn2_contribution() {
    let h = fixtures::cifar10();
    let r = compute_rates(&h);
    let s = h.stage(StageId(2));
    assert!((s.latency_s * r.get(s.id) - 0.0216).abs() < 1e-12);
}

#[test]
fn partition_d_aggregates() {
    let h = fixtures::cifar10();
    let r = compute_rates(&h);
    let e = evaluate_partition(&h, &r, &partition_d(), Frames::Steady).unwrap();
    assert!((e.device_loads[0] - 0.038).abs() <= 0.001);
    let mut loads = e.device_loads.clone();
    loads.sort_by(|a, b| b.total_cmp(a));
    for (got, want) in loads.iter().zip([0.038, 0.028, 0.020]) {
        assert!((got - want).abs() <= 0.001, "{got} vs {want}");
    }
    assert!((e.comm_cost - 0.018).abs() <= 0.001);
    assert_eq!(
        e.cut_edges,
        vec![(StageId(0), StageId(1)), (StageId(0), StageId(3))]
    );
}

#[test]
fn selection_returns_partition_d() {
    let h = fixtures::cifar10();
    let r = compute_rates(&h);
    for frames in [Frames::Finite(100), Frames::Finite(1000), Frames::Steady] {
        let s = select_best(&h, &r, 3, frames, &SearchOptions::default()).unwrap();
        assert_eq!(s.partition, partition_d().canonical(), "{frames}");
    }
}

#[test]
fn balanced_min_cut_beats_latency_balance() {
    let h = fixtures::cifar10();
    let r = compute_rates(&h);
    let d = evaluate_partition(&h, &r, &partition_d(), Frames::Steady).unwrap();
    let c = evaluate_partition(&h, &r, &partition_c(), Frames::Steady).unwrap();
    assert!(d.estimated_throughput > c.estimated_throughput);
    assert!(d.imbalance < c.imbalance);
    // Partition (c) balances raw latencies to within a millisecond.
    let raw: Vec<f64> = partition_c()
        .groups()
        .iter()
        .map(|g| g.iter().map(|&s| h.stage(s).latency_s).sum())
        .collect();
    let spread = raw.iter().copied().fold(0.0, f64::max) - raw.iter().copied().fold(1.0, f64::min);
    assert!(spread < 0.001, "{raw:?}");
}

#[test]
fn imbalance_of_quoted_loads() {
    let h = fixtures::cifar10();
    let r = compute_rates(&h);
    let mut e = evaluate_partition(&h, &r, &partition_d(), Frames::Steady).unwrap();
    e.device_loads = vec![0.038, 0.028, 0.020];
    assert!((workload_imbalance(&e).unwrap() - 1.9).abs() < 1e-12);
}

#[test]
fn single_device_reference_profile() {
    let h = hpipe_core::Hierarchy::from_json(r#"{"stages":[{"id":0,"latency_s":0.095}]}"#).unwrap();
    let r = compute_rates(&h);
    let e = evaluate_partition(&h, &r, &Partition::single(1, 1), Frames::Steady).unwrap();
    assert_eq!(e.comm_cost, 0.0);
    assert!((e.estimated_throughput - 10.53).abs() < 0.01);
}
