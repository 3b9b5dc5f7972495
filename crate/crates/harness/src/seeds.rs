//! Reproducible seeds and configuration fingerprints.

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Seed for one purpose within one run, independent of scheduling order.
///
/// Each part is length-prefixed so `("ab", "c")` and `("a", "bc")` differ.
pub fn derive_seed(global: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of the result-relevant part of the config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(&cfg.hashed_view()).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}
