//! Seeded RNG streams. Every source of randomness in a run is derived from
//! one 64-bit seed plus a stream name, so perturbing one purpose (say, data
//! order) leaves the others untouched.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Stream names used across the crate.
pub mod stream {
    pub const INIT: &str = "init";
    pub const DATA_ORDER: &str = "data-order";
    pub const TEXTURES: &str = "textures";
    pub const SYNTH: &str = "synth";
}

/// Derive a deterministic RNG for `(seed, name)`.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
