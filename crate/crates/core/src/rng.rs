//! Labelled deterministic random streams.
//!
//! Each consumer draws from its own ChaCha stream keyed by a seed, an item key
//! (scene or image id) and a purpose label, so adding draws to one purpose
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A generator for `(seed, key, label)`.
pub fn stream(seed: u64, key: &str, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(key.as_bytes())));
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// Purpose labels used across the crate.
pub mod label {
    pub const PROTOTYPES: &str = "prototypes";
    pub const NOISE: &str = "noise";
    pub const DESCRIPTIONS: &str = "descriptions";
    pub const PROPOSALS: &str = "proposals";
    pub const RANDOM_CROPS: &str = "random-crops";
    pub const ABLATION_CROPS: &str = "ablation-crops";
}
