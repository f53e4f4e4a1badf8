//! Deterministic, counter-based seeding.
//!
//! Every random decision in the crate derives its own `ChaCha8Rng` from a
//! tuple of integers (run seed, a purpose tag, counters such as domain or
//! example index). Derivation hashes the tuple with SHA-256, so streams are
//! independent of each other and of iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable 64-bit tag for a purpose string, used as one component of a seed
/// tuple (e.g. `derive_rng(&[seed, tag("init")])`).
pub fn tag(purpose: &str) -> u64 {
    let digest = Sha256::digest(purpose.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hash a seed tuple into 32 bytes of key material.
pub fn derive_seed(parts: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Independent RNG stream for the given seed tuple.
pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(parts))
}
