//! Seedable, splittable random streams.
//!
//! A [`SeedStream`] is a 64-bit seed. `split(label)` derives a child seed as
//! the first eight bytes (little-endian) of `SHA-256(seed_le ‖ label)`, and
//! `rng()` keys a ChaCha8 generator with the full 32-byte
//! `SHA-256(seed_le ‖ "rng")`. Both primitives are platform-independent, so
//! every initialization and shuffle is reproducible across machines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn split(self, label: &str) -> Self {
        let digest = Sha256::new()
            .chain_update(self.0.to_le_bytes())
            .chain_update(label.as_bytes())
            .finalize();
        Self(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    pub fn rng(self) -> Rng {
        let digest = Sha256::new()
            .chain_update(self.0.to_le_bytes())
            .chain_update(b"rng")
            .finalize();
        ChaCha8Rng::from_seed(digest.into())
    }
}
