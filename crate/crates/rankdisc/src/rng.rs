//! Seed management: one master seed, split deterministically per component.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a component-specific sub-seed from the master seed.
///
/// Two runs with the same master seed get identical streams everywhere; two
/// components with different labels get independent streams.
pub fn subseed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// A ChaCha stream for one component of a run.
pub fn component_rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(master, label))
}
