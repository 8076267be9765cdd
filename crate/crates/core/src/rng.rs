//! Keyed random streams.
//!
//! Every stochastic decision in training is drawn from a ChaCha8 stream whose
//! seed is derived from `(global seed, user, epoch, view)`. Streams are never
//! shared between workers, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Reserved view indices. Augmentation uses 0 and 1.
pub mod view {
    pub const AUG_FIRST: u64 = 0;
    pub const AUG_SECOND: u64 = 1;
    pub const DROPOUT_ORIGINAL: u64 = 2;
    pub const DROPOUT_FIRST: u64 = 3;
    pub const DROPOUT_SECOND: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const AUDIT: u64 = 7;
    pub const SYNTH: u64 = 8;
}

/// Seed material for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub user: u64,
    pub epoch: u64,
    pub view: u64,
}

impl RngStream {
    pub fn new(seed: u64, user: u64, epoch: u64, view: u64) -> Self {
        Self {
            seed,
            user,
            epoch,
            view,
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut state = splitmix(self.seed ^ 0x6a09_e667_f3bc_c908);
        let mut key = [0u8; 32];
        for (chunk, word) in
            key.chunks_exact_mut(8)
                .zip([self.user, self.epoch, self.view, 0x243f_6a88_85a3_08d3])
        {
            state = splitmix(state ^ word);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
