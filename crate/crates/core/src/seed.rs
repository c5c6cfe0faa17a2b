//! Named sub-seeds derived from one experiment seed.

use sha2::{Digest, Sha256};

/// Independent seed for the stream called `name`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
