//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the master
//! seed plus a label, so adding or removing users never reshuffles anyone else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derive an independent stream from `seed` and a list of labels.
pub fn substream(seed: u64, labels: &[&str]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        // length prefix keeps ("ab","c") and ("a","bc") apart
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Stream for one user's task construction.
pub fn user_stream(seed: u64, user_id: &str) -> StreamRng {
    substream(seed, &["user", user_id])
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
