//! Named random substreams.
//!
//! Every stochastic stage draws from a ChaCha generator whose seed is a stable
//! 64-bit hash of the master seed and a list of labels (stage name, knee id,
//! protocol, tree index, ...). The hash is the first eight bytes of SHA-256
//! over a length-prefixed encoding, read little-endian.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stable hash of `master` and `labels`.
pub fn derive(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(master: u64, labels: &[&str]) -> Rng {
    rng(derive(master, labels))
}
