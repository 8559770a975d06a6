//! Deterministic RNG derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream keyed by
//! SHA-256 of a base seed plus a context tag, so independent components
//! (clips, epochs, parameter groups) get decorrelated but fully reproducible
//! streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A seeded RNG for the given (seed, tag) context.
pub fn rng_from(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Platform-independent stable hash of a string (first 8 bytes of SHA-256,
/// big-endian). Used for the fixed validation split.
pub fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}
