//! Labeled sub-seeds derived from one run seed.
//!
//! Every random stream in a run (data generation, splitting, init, shuffling,
//! exemplar selection, dropout) gets its own seed so changing one stage does not
//! perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit seed from `(run_seed, label)`.
pub fn sub_seed(run_seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn labeled_rng(run_seed: u64, label: &str) -> ChaCha8Rng {
    rng(sub_seed(run_seed, label))
}
