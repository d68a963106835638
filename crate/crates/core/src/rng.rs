//! Deterministic random-stream derivation.
//!
//! Every consumer of randomness receives its own [`Stream`], derived from the
//! master seed and a path of integer labels. Derivation is a SplitMix64 fold
//! over the path, so stream `(seed, [WORLD, 17])` is identical no matter how
//! many other streams were drawn before it or on which thread. This is what
//! makes parallel generation byte-identical to serial generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG type handed to every sampling routine.
pub type Stream = ChaCha8Rng;

/// Domain labels used as the first path element.
pub mod domain {
    pub const WORLD: u64 = 1;
    pub const USER: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const SFT: u64 = 5;
    pub const RL_EPISODES: u64 = 6;
    pub const ROLLOUT: u64 = 7;
    pub const REWARD: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const TEST: u64 = 10;
    pub const EVAL: u64 = 11;
    pub const COLD_EPISODES: u64 = 12;
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a label path into a 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// Derive an independent stream for `path` under `master`.
pub fn stream(master: u64, path: &[u64]) -> Stream {
    let mut seed = [0u8; 32];
    let mut s = derive_seed(master, path);
    for chunk in seed.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child stream from a parent stream by drawing one word from it.
pub fn fork(parent: &mut Stream, label: u64) -> Stream {
    use rand::RngCore;
    stream(parent.next_u64(), &[label])
}
