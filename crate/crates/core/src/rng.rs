//! Named random sub-streams derived from one run seed.
//!
//! Each consumer (parameter init, dropout masks, shuffling) draws from its
//! own stream keyed by a name and a few integer coordinates, so toggling one
//! feature never shifts the random numbers another feature sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, name: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
