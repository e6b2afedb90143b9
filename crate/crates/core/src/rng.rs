//! Named random sub-streams derived from one experiment seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator for the sub-stream `name` of `seed`.
///
/// Distinct names give statistically independent streams, so data
/// generation, initialization and batching never share random draws.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// A child seed for the sub-stream `name`, for components that take a
/// plain `u64` seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    stream(seed, name).next_u64()
}
