//! Explicitly keyed random streams.
//!
//! Every random draw in the crate comes from a [`StreamKey`]: a master seed
//! plus a hierarchical path. The key expands into a ChaCha8 key (from the
//! seed) and a 64-bit ChaCha stream id (from the path), so two keys that differ
//! anywhere in their path yield independent counter-based streams. Work can
//! therefore be split across threads in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub path: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: 0 }
    }

    /// Derives the key of a sub-stream labelled `tag`.
    pub fn child(self, tag: u64) -> Self {
        let path = splitmix64(splitmix64(self.path ^ 0xD1B5_4A32_D192_ED03).wrapping_add(tag));
        Self {
            seed: self.seed,
            path,
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.path);
        rng
    }
}
