mod common;

use common::{random_hierarchy, rng};
use hpipe_core::fixtures;
use hpipe_core::model::Frames;
use hpipe_core::{
    compare_report, compute_rates, evaluate_partition, params_from_partition, select_best,
    simulate, CommMode, Hierarchy, Partition, SearchOptions, StageId, WorkloadSpec,
};
use rand::Rng;

fn random_case(r: &mut impl Rng, seed: u64) -> (Hierarchy, Partition) {
    let n = r.gen_range(2..=8);
    let h = random_hierarchy(&mut rng(seed), n);
    let devices = r.gen_range(1..=3);
    let assignment = (0..n).map(|_| r.gen_range(0..devices)).collect();
    (h, Partition::new(assignment, devices).unwrap())
}

#[test]
fn runs_are_deterministic() {
    let h = fixtures::cifar10();
    let p = Partition::new(vec![0, 1, 1, 2, 2, 1], 3).unwrap();
    for mode in [CommMode::ModelFaithful, CommMode::Overlapped] {
        let a = simulate(&h, &p, &WorkloadSpec::back_to_back(500, 42), mode).unwrap();
        let b = simulate(&h, &p, &WorkloadSpec::back_to_back(500, 42), mode).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}

#[test]
fn conservation_and_latency_floor() {
    let mut r = rng(77);
    for seed in 0..40 {
        let (h, p) = random_case(&mut r, seed);
        for mode in [CommMode::ModelFaithful, CommMode::Overlapped] {
            let rep = simulate(&h, &p, &WorkloadSpec::back_to_back(300, seed), mode).unwrap();
            assert_eq!(rep.frames_completed, 300);
            assert!((rep.throughput_fps - 300.0 / rep.total_time_s).abs() < 1e-9);

            let mut expected_busy = vec![0.0; p.device_count()];
            for (frame, &leaf) in rep.leaves.iter().enumerate() {
                let path = h.path_to(StageId(leaf));
                let mut floor = 0.0;
                for (k, &s) in path.iter().enumerate() {
                    floor += h.stage(s).latency_s;
                    expected_busy[p.device_of(s)] += h.stage(s).latency_s;
                    if k > 0 && p.device_of(path[k - 1]) != p.device_of(s) {
                        floor += h.stage(s).transfer_s;
                        if mode == CommMode::ModelFaithful {
                            expected_busy[p.device_of(path[k - 1])] += h.stage(s).transfer_s;
                        }
                    }
                }
                assert!(rep.latency.per_frame_s[frame] >= floor - 1e-9);
            }
            for (got, want) in rep.device_busy_s.iter().zip(&expected_busy) {
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
    }
}

#[test]
fn overlapping_communication_never_slows_down() {
    let mut r = rng(5);
    for seed in 0..60 {
        let (h, p) = random_case(&mut r, seed);
        let spec = WorkloadSpec::back_to_back(400, seed);
        let f = simulate(&h, &p, &spec, CommMode::ModelFaithful).unwrap();
        let o = simulate(&h, &p, &spec, CommMode::Overlapped).unwrap();
        assert!(
            o.throughput_fps >= f.throughput_fps * (1.0 - 1e-9),
            "seed {seed}"
        );
    }
}

#[test]
fn throughput_approaches_the_bottleneck_bound() {
    let mut r = rng(6);
    for seed in 0..40 {
        let (h, p) = random_case(&mut r, seed);
        let rep = simulate(
            &h,
            &p,
            &WorkloadSpec::back_to_back(1000, seed),
            CommMode::ModelFaithful,
        )
        .unwrap();
        let busiest = rep.device_busy_s.iter().copied().fold(0.0, f64::max);
        let bound = 1000.0 / busiest;
        assert!(rep.throughput_fps <= bound * (1.0 + 1e-9));
        assert!(
            rep.throughput_fps >= 0.9 * bound,
            "seed {seed}: {} vs {bound}",
            rep.throughput_fps
        );
    }
}

#[test]
fn single_device_matches_expected_work() {
    for h in [
        fixtures::cifar10(),
        fixtures::svhn(),
        fixtures::caltech256(),
    ] {
        let r = compute_rates(&h);
        let expected: f64 = h.stages().iter().map(|s| s.latency_s * r.get(s.id)).sum();
        for mode in [CommMode::ModelFaithful, CommMode::Overlapped] {
            let rep = simulate(
                &h,
                &Partition::single(h.len(), 1),
                &WorkloadSpec::back_to_back(1000, 1),
                mode,
            )
            .unwrap();
            let rel = (rep.throughput_fps * expected - 1.0).abs();
            assert!(rel < 0.01, "{rel}");
        }
    }
}

#[test]
fn cifar10_simulation_tracks_the_model() {
    let h = fixtures::cifar10();
    let r = compute_rates(&h);
    let frames = Frames::Finite(1000);
    let sel = select_best(&h, &r, 3, frames, &SearchOptions::default()).unwrap();
    let params = params_from_partition(&h, &r, &sel.partition, &sel.eval, frames);
    let rep = simulate(
        &h,
        &sel.partition,
        &WorkloadSpec::back_to_back(1000, 9),
        CommMode::ModelFaithful,
    )
    .unwrap();
    let dev = compare_report(&rep, &params);
    assert!(dev.throughput_rel_err.abs() < 0.15, "{dev:?}");
    let e = evaluate_partition(&h, &r, &sel.partition, frames).unwrap();
    assert_eq!(e.estimated_throughput, dev.model_fps);
}
