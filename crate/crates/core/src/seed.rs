//! Labeled, splittable seeding.
//!
//! Every experiment owns one `u64` seed. Components draw their randomness from
//! sub-streams keyed by a label path (`"secret"`, `"data"`, `"init/3"`, ...), so
//! any component can be replayed without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedTree {
    key: [u8; 32],
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"lpnkit/seed");
        h.update(seed.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    /// Child node for `label`.
    pub fn child(&self, label: &str) -> SeedTree {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Self { key: h.finalize().into() }
    }

    /// Child node for `label/index`.
    pub fn indexed(&self, label: &str, index: u64) -> SeedTree {
        self.child(&format!("{label}/{index}"))
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::from_seed(self.key)
    }

    /// Shorthand for `self.child(label).rng()`.
    pub fn stream(&self, label: &str) -> Rng {
        self.child(label).rng()
    }
}
