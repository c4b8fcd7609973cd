//! Derivation of independent random streams from one run seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream identifiers used across the crate.
pub mod stream {
    pub const BATCH_ORDER: u64 = 1;
    pub const FUSION_BATCH: u64 = 2;
    pub const MLP_MEMBER: u64 = 3;
}

/// A seed for `(stream, index)` that is independent of every other pair.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}
