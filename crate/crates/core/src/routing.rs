//! Per-frame leaf sampling shared by the simulator and the live coordinator.
//!
//! Each frame's draw comes from a ChaCha8 stream selected by the frame index,
//! so frame `i` gets the same leaf no matter how many frames were drawn before
//! it or in which order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hierarchy::{Hierarchy, StageId};

#[derive(Clone, Debug)]
pub struct FrameRouter {
    seed: u64,
    /// `(leaf, cumulative probability)` in leaf id order.
    cumulative: Vec<(StageId, f64)>,
}

impl FrameRouter {
    pub fn new(hierarchy: &Hierarchy, seed: u64) -> Self {
        let mut acc = 0.0;
        let cumulative = hierarchy
            .leaf_distribution()
            .into_iter()
            .filter(|&(_, p)| p > 0.0)
            .map(|(leaf, p)| {
                acc += p;
                (leaf, acc)
            })
            .collect();
        FrameRouter { seed, cumulative }
    }

    pub fn leaf_for(&self, frame: u64) -> StageId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(frame);
        let u: f64 = rng.gen();
        self.cumulative
            .iter()
            .find(|&&(_, c)| u < c)
            .or(self.cumulative.last())
            .map(|&(leaf, _)| leaf)
            .expect("hierarchy has a leaf with positive probability")
    }

    pub fn leaves(&self, frames: u64) -> Vec<StageId> {
        (0..frames).map(|i| self.leaf_for(i)).collect()
    }
}
