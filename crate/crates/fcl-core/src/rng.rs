//! Deterministic RNG stream derivation.
//!
//! Every random decision in the library draws from a ChaCha8 stream keyed by
//! the run seed plus a purpose tag and context indices (epoch, step, example).
//! Streams for different purposes never interleave, so e.g. drawing
//! perturbation noise cannot shift the shuffle order of a later epoch.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping unrelated streams apart.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SYNTH: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const PERTURB: u64 = 5;
    pub const AUGMENT: u64 = 6;
}

/// SplitMix64 finalizer; full-period mixing of one word.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed` one word at a time.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(seed);
    for &t in tags {
        acc = splitmix(acc ^ splitmix(t));
    }
    acc
}

/// Deterministic ChaCha8 stream for (seed, tags).
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        let word = mix(seed, tags) ^ splitmix(i as u64 ^ 0xA5A5_5A5A_0F0F_F0F0);
        let word = splitmix(word.wrapping_add(i as u64));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
