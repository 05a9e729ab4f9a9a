//! Deterministic child seeds derived from one master seed.
//!
//! `child(master, label)` is the first 8 bytes (little-endian) of
//! `SHA-256(master.to_le_bytes() || label)`. Labels in use: `init`,
//! `augment`, `windows`, `synthetic`, `forecast`, `probe`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn child(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Generator for one pipeline stage.
pub fn rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child(master, label))
}
