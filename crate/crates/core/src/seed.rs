//! Per-sample seed derivation so that parallel runs reproduce serial ones.

use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from `(global, sample_id, tag)`.
pub fn derive_seed(global: u64, sample_id: &str, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((sample_id.len() as u64).to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Like [`derive_seed`] with an integer index in place of a string id.
pub fn derive_indexed(global: u64, tag: &str, index: u64) -> u64 {
    derive_seed(global, &index.to_string(), tag)
}
