//! Keyed random substreams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the master
//! seed and a stable key, so adding or reordering draws in one place never
//! shifts the numbers seen somewhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream for `(label, key, round)` under `seed`.
pub fn stream(seed: u64, label: &str, key: &str, round: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    hasher.update(round.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
