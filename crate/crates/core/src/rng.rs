//! Seeded, splittable random streams.
//!
//! Every consumer of randomness asks for a stream by `(purpose, index)`; the
//! stream is a ChaCha generator keyed by the experiment seed and selected by a
//! stream id derived from the label. Two consumers never share a stream, so
//! adding or reordering draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(purpose, index)`.
    pub fn stream(&self, purpose: &str, index: u64) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(purpose.as_bytes());
        hasher.update(index.to_le_bytes());
        let digest = hasher.finalize();
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from_le_bytes(id));
        rng
    }
}

/// `n` draws from N(0, std²).
pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite non-negative std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let tree = SeedTree::new(7);
        let a: Vec<u64> = (0..4).map(|_| tree.stream("x", 1).random()).collect();
        let mut s = tree.stream("x", 1);
        let b: Vec<u64> = (0..4).map(|_| s.random()).collect();
        assert_eq!(a[0], b[0]);
        let mut other = tree.stream("x", 2);
        assert_ne!(b[0], other.random::<u64>());
        let mut other_seed = SeedTree::new(8).stream("x", 1);
        assert_ne!(b[0], other_seed.random::<u64>());
    }
}
