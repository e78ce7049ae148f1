//! Every random stream is derived from one root seed plus a label, so that
//! independent jobs never share a generator and results do not depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Mixes a root seed with a label and index into a child seed.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(root: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, index))
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 over the little-endian bytes of a float sequence.
pub fn hash_f64s<'a>(chunks: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        for v in c {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
