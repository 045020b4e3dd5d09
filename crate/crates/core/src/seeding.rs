//! Stable derivation of per-task RNG streams from a master seed.
//!
//! Streams are keyed by (master seed, tag, index) through SHA-256, so the
//! mapping is stable across platforms and releases — the determinism contract
//! of the experiment runner depends on this, not on any hasher internals.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive an independent, reproducible RNG stream.
pub fn derive_rng(master_seed: u64, tag: &str, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(tag.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}
