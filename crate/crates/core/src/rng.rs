//! Named random substreams.
//!
//! Every consumer of randomness derives its own generator from the run seed and
//! a stable name, so adding a new consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn substream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Substream of a substream, e.g. per-scene generators.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> Rng {
    substream(seed, &format!("{name}/{index}"))
}
