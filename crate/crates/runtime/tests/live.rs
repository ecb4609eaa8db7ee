mod common;

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use common::{launch, serial};
use hpipe_core::{fixtures, simulate, CommMode, Hierarchy, Partition, StageId, WorkloadSpec};
use hpipe_runtime::{
    profile_link, Backoff, Coordinator, CoordinatorOptions, DeploymentPlan, KernelKind, MsgType,
    RuntimeError, WireMessage, Worker,
};

fn cifar_plan() -> (Hierarchy, Partition) {
    (
        fixtures::cifar10().scaled(0.25, 0.25),
        Partition::new(vec![0, 1, 1, 2, 2, 1], 3).unwrap(),
    )
}

fn cut_edges_on_path(h: &Hierarchy, p: &Partition, leaf: u16) -> u64 {
    let path = h.path_to(StageId(leaf));
    path.windows(2)
        .filter(|w| p.device_of(w[0]) != p.device_of(w[1]))
        .count() as u64
}

#[test]
fn single_worker_runs_at_kernel_rate() {
    let _g = serial();
    let h = Hierarchy::from_json(r#"{"stages":[{"id":0,"latency_s":0.010}]}"#).unwrap();
    let c = launch(
        &h,
        &Partition::single(1, 1),
        CoordinatorOptions::default(),
        |p| p.kernel = KernelKind::Timed,
    );
    let (report, _) = c.run(&WorkloadSpec::back_to_back(100, 1));
    assert_eq!(report.frames_completed, 100);
    assert!(
        (report.throughput_fps / 100.0 - 1.0).abs() <= 0.10,
        "{}",
        report.throughput_fps
    );
    assert!(report.hops_per_frame.iter().all(|&k| k == 1));
}

#[test]
fn three_workers_conserve_frames_and_follow_the_simulated_routes() {
    let _g = serial();
    let (h, p) = cifar_plan();
    for mode in [CommMode::ModelFaithful, CommMode::Overlapped] {
        let c = launch(&h, &p, CoordinatorOptions::default(), |plan| {
            plan.kernel = KernelKind::Timed;
            plan.comm_mode = mode;
            plan.emulate_transfers = true;
        });
        let spec = WorkloadSpec::back_to_back(500, 17);
        let (report, metrics) = c.run(&spec);
        assert_eq!(report.frames_injected, 500);
        assert_eq!(report.frames_completed, 500);
        assert_eq!(report.mode, mode);
        let sim = simulate(&h, &p, &spec, mode).unwrap();
        assert_eq!(report.leaves, sim.leaves);
        for (leaf, hops) in report.leaves.iter().zip(&report.hops_per_frame) {
            assert_eq!(*hops, cut_edges_on_path(&h, &p, *leaf) + 1);
        }
        let executed: u64 = metrics
            .iter()
            .flat_map(|m| m.stage_time_s.values())
            .map(|t| t.count)
            .sum();
        let expected: u64 = report
            .leaves
            .iter()
            .map(|&l| h.path_to(StageId(l)).len() as u64)
            .sum();
        assert_eq!(executed, expected);
        assert_eq!(report.latency.per_frame_s.len(), 500);
        for s in ["1", "3"] {
            let tau = report.measured_transfer_s[s];
            let want = h.stage(StageId(s.parse().unwrap())).transfer_s;
            assert!(tau >= want && tau < want + 0.002, "{s}: {tau}");
        }
        let measured = report.measured_hierarchy(&h);
        for (a, b) in h.stages().iter().zip(measured.stages()) {
            let slack = (0.15 * a.latency_s).max(3e-4);
            assert!(
                (b.latency_s - a.latency_s).abs() < slack,
                "{} vs {}",
                b.latency_s,
                a.latency_s
            );
        }
    }
}

#[test]
fn chain_crossing_two_cuts_forwards_twice() {
    let _g = serial();
    let h = Hierarchy::from_json(
        r#"{"stages":[{"id":0,"latency_s":0.001,"children":[1]},
            {"id":1,"latency_s":0.001,"transfer_s":0.001,"children":[2]},
            {"id":2,"latency_s":0.001,"transfer_s":0.001}]}"#,
    )
    .unwrap();
    let p = Partition::new(vec![0, 1, 2], 3).unwrap();
    let c = launch(&h, &p, CoordinatorOptions::default(), |plan| {
        plan.kernel = KernelKind::Timed
    });
    let (report, metrics) = c.run(&WorkloadSpec::back_to_back(40, 3));
    assert!(report.hops_per_frame.iter().all(|&k| k == 3));
    let forwards: u64 = metrics
        .iter()
        .flat_map(|m| m.send_time_s.values())
        .map(|t| t.count)
        .sum();
    assert_eq!(forwards, 80);
}

#[test]
fn interval_arrivals_space_out_injections() {
    let _g = serial();
    let h = Hierarchy::from_json(r#"{"stages":[{"id":0,"latency_s":0.002}]}"#).unwrap();
    let c = launch(
        &h,
        &Partition::single(1, 1),
        CoordinatorOptions::default(),
        |p| p.kernel = KernelKind::Timed,
    );
    let spec = WorkloadSpec {
        frames: 20,
        arrival: hpipe_core::Arrival::Interval { interval_s: 0.01 },
        seed: 0,
        window: None,
    };
    let (report, _) = c.run(&spec);
    assert!(report.total_time_s >= 0.19, "{}", report.total_time_s);
    assert!(report.latency.p99_s < 0.009, "{}", report.latency.p99_s);
}

#[test]
fn silent_worker_times_out_with_partial_report() {
    let _g = serial();
    let fake = TcpListener::bind("127.0.0.1:0").unwrap();
    let coord = TcpListener::bind("127.0.0.1:0").unwrap();
    let h = Hierarchy::from_json(r#"{"stages":[{"id":0,"latency_s":0.001}]}"#).unwrap();
    let plan = DeploymentPlan::new(
        &h,
        &Partition::single(1, 1),
        vec![fake.local_addr().unwrap().to_string()],
        coord.local_addr().unwrap().to_string(),
    )
    .unwrap();
    // Answers pings, swallows frames.
    thread::spawn(move || {
        let (mut s, _) = fake.accept().unwrap();
        while let Ok(Some(m)) = WireMessage::read_from(&mut s) {
            if m.msg_type == MsgType::ProfilePing {
                WireMessage::pong(&m).write_to(&mut s).unwrap();
            }
        }
    });
    let options = CoordinatorOptions {
        result_timeout: Duration::from_millis(200),
        ..Default::default()
    };
    match Coordinator::from_listener(coord, options).run(&plan, &WorkloadSpec::back_to_back(10, 0))
    {
        Err(RuntimeError::Timeout { partial, .. }) => {
            assert_eq!(partial.frames_completed, 0);
            assert_eq!(partial.frames_injected, 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreachable_worker_is_reported() {
    let _g = serial();
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let h = Hierarchy::from_json(r#"{"stages":[{"id":0,"latency_s":0.001}]}"#).unwrap();
    let plan = DeploymentPlan::localhost(&h, &Partition::single(1, 1), port).unwrap();
    let coord = TcpListener::bind("127.0.0.1:0").unwrap();
    let options = CoordinatorOptions {
        backoff: Backoff {
            attempts: 5,
            base: Duration::from_millis(1),
        },
        ..Default::default()
    };
    match Coordinator::from_listener(coord, options).run(&plan, &WorkloadSpec::back_to_back(1, 0)) {
        Err(RuntimeError::Unreachable { attempts, .. }) => assert_eq!(attempts, 5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_input_aborts_the_worker() {
    let _g = serial();
    let h = Hierarchy::from_json(r#"{"stages":[{"id":0,"latency_s":0.001}]}"#).unwrap();
    let plan = DeploymentPlan::localhost(&h, &Partition::single(1, 1), 1).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let worker = Worker::from_listener(listener, plan.resolve().unwrap(), 0).unwrap();
    let handle = thread::spawn(move || worker.run());
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(b"GARBAGE-GARBAGE-GARBAGE-GARBAGE").unwrap();
    assert!(matches!(
        handle.join().unwrap(),
        Err(RuntimeError::Wire(hpipe_runtime::WireError::BadMagic(_)))
    ));
}

#[test]
fn link_profile_is_positive_and_grows_with_payload() {
    let _g = serial();
    let h = Hierarchy::from_json(r#"{"stages":[{"id":0,"latency_s":0.001}]}"#).unwrap();
    let c = launch(
        &h,
        &Partition::single(1, 1),
        CoordinatorOptions::default(),
        |_| {},
    );
    let endpoint = c.plan.device_endpoints[0].clone();
    let small = profile_link(&endpoint, 1024, 9).unwrap();
    let large = profile_link(&endpoint, 1 << 20, 9).unwrap();
    assert!(small > 0.0 && small < 1e-3, "{small}");
    assert!(large >= small, "{large} < {small}");
    c.run(&WorkloadSpec::back_to_back(1, 0));
}
