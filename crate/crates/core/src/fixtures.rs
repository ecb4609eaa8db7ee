//! Example hierarchies shaped after published hierarchical classifiers.
//!
//! `cifar10` carries a stage profile fitted to the CIFAR-10 walkthrough: stage
//! 2 (DNN2) takes 36 ms with a 20 ms transfer and a 0.6 rate of use, and the
//! partition `<0>, <3, 4>, <1, 2, 5>` has expected loads of 38, 20 and 28 ms
//! with 18 ms of expected communication. The other fixtures reproduce only the
//! tree shapes.

use crate::hierarchy::Hierarchy;

pub const CIFAR10_JSON: &str = include_str!("../fixtures/cifar10.json");
pub const SVHN_JSON: &str = include_str!("../fixtures/svhn.json");
pub const CALTECH256_JSON: &str = include_str!("../fixtures/caltech256.json");
pub const TEN_LEAVES_JSON: &str = include_str!("../fixtures/ten_leaves.json");

/// Six stages, depth 3: `0 -> {1, 3}`, `1 -> {2, 5}`, `3 -> {4}`.
pub fn cifar10() -> Hierarchy {
    Hierarchy::from_json(CIFAR10_JSON).expect("fixture is valid")
}

/// Depth 2: a root router over three leaf classifiers.
pub fn svhn() -> Hierarchy {
    Hierarchy::from_json(SVHN_JSON).expect("fixture is valid")
}

/// Twelve stages, depth 5, uniform leaves.
pub fn caltech256() -> Hierarchy {
    Hierarchy::from_json(CALTECH256_JSON).expect("fixture is valid")
}

/// Class-level CIFAR-10 tree: two groups of 4 and 6 leaf classes.
pub fn ten_leaves() -> Hierarchy {
    Hierarchy::from_json(TEN_LEAVES_JSON).expect("fixture is valid")
}
