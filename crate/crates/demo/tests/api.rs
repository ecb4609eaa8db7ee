use hpipe_core::{CommMode, Hierarchy};
use hpipe_demo::{builtin_json, partition_view, scaling_rows, timeline, DemoError};

fn cifar10() -> Hierarchy {
    Hierarchy::from_json(&builtin_json("cifar10").unwrap()).unwrap()
}

#[test]
fn builtins_parse_and_unknown_names_fail() {
    for name in ["cifar10", "svhn", "caltech256", "ten-leaves"] {
        Hierarchy::from_json(&builtin_json(name).unwrap()).unwrap();
    }
    assert!(matches!(
        builtin_json("imagenet"),
        Err(DemoError::UnknownBuiltin(_))
    ));
}

#[test]
fn partition_view_colors_every_stage() {
    let v = partition_view(&cifar10(), 3, 0).unwrap();
    assert_eq!(v.document.devices, vec![vec![0], vec![1, 2, 5], vec![3, 4]]);
    assert_eq!(v.stages.len(), 6);
    for s in &v.stages {
        assert!(v.document.devices[s.device].contains(&s.id));
    }
    assert_eq!(v.stages[0].parent, None);
    assert_eq!(v.stages[0].rate, 1.0);
    let json = serde_json::to_value(&v).unwrap();
    assert!(json.get("devices").is_some() && json.get("eval").is_some());
}

#[test]
fn scaling_curve_is_monotone_and_starts_at_one() {
    let rows = scaling_rows(&cifar10(), 4, 500, 1).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].speedup, 1.0);
    for w in rows.windows(2) {
        assert!(w[1].model_fps >= w[0].model_fps);
    }
    for r in &rows {
        assert!(
            (r.sim_fps - r.model_fps).abs() / r.model_fps < 0.15,
            "{r:?}"
        );
        assert!(r.devices_used <= r.devices);
    }
    assert!(scaling_rows(&cifar10(), 3, 0, 1).is_err());
}

#[test]
fn timeline_spans_fit_the_run() {
    let t = timeline(&cifar10(), 3, 200, 7, CommMode::ModelFaithful, 10).unwrap();
    assert_eq!(t.report.frames_completed, 200);
    assert!(!t.spans.is_empty());
    assert!(t
        .spans
        .iter()
        .all(|s| s.frame < 10 && s.start_s <= s.end_s && s.device < 3));
    assert!(t.spans.iter().any(|s| s.send));
    let mut per_device: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 3];
    for s in t.spans.iter().filter(|s| !s.send) {
        per_device[s.device].push((s.start_s, s.end_s));
    }
    for spans in &mut per_device {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            assert!(w[1].0 >= w[0].1 - 1e-12, "overlapping stage spans {w:?}");
        }
    }
}

#[test]
fn overlapped_timeline_is_not_slower() {
    let h = cifar10();
    let f = timeline(&h, 3, 300, 2, CommMode::ModelFaithful, 0).unwrap();
    let o = timeline(&h, 3, 300, 2, CommMode::Overlapped, 0).unwrap();
    assert!(f.spans.is_empty());
    assert!(o.report.throughput_fps >= f.report.throughput_fps);
}
