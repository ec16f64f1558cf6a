//! Named random substreams derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Deterministic generator for the stream `name` under `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Substream indexed by an integer, e.g. one per triplet or batch item.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    substream(seed, &format!("{name}/{index}"))
}
