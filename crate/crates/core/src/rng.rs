//! Named random substreams derived from a single root seed.
//!
//! Every consumer of randomness asks for its own stream by name, so adding a
//! draw in one stage never shifts the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const SHUFFLE: &str = "shuffle";

/// Derives a 64-bit seed for `stream` from `root`. Stream names may be nested
/// with `/`, e.g. `"data/style"`.
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(stream.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn substream(root: u64, stream: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, stream))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
