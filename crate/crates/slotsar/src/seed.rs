//! Deterministic seed derivation.
//!
//! Every random draw in the pipeline (parameter init, scene generation,
//! slot sampling, epoch shuffles) uses a sub-seed derived from the master
//! seed and a stable label, so parallel work matches serial work and
//! resumed runs recompute the exact stream they would have seen.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit sub-seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Derive with a label plus counter (per-sample, per-step streams).
pub fn derive_seed_n(master: u64, label: &str, n: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(n.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// RNG seeded from a derived seed.
pub fn rng_for(master: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, label))
}

/// RNG seeded from a derived seed with counter.
pub fn rng_for_n(master: u64, label: &str, n: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed_n(master, label, n))
}
