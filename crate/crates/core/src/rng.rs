//! Deterministic random streams.
//!
//! Every random draw in a chain is keyed by `(seed, step, index)`: `step`
//! counts grid updates and `index` identifies the patch (or pixel block)
//! inside the update. Each key maps to its own ChaCha stream, so the draws
//! do not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Identifies one batch of independent draws, e.g. one grid update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step }
    }

    /// Generator for item `index` of this batch.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed) ^ mix64(self.step.rotate_left(17) ^ 0x5851_f42d_4c95_7f2d));
        rng.set_stream(index);
        rng
    }

    /// Folds this key into a running digest.
    pub fn digest_into(&self, acc: u64) -> u64 {
        mix64(acc ^ mix64(self.seed ^ self.step.wrapping_mul(0x2545_f491_4f6c_dd1d)))
    }
}
