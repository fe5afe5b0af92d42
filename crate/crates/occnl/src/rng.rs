//! Seed derivation and deterministic random streams.
//!
//! All randomness in a run flows from one top-level seed. Stages derive
//! sub-seeds as the first eight bytes of `SHA-256(seed_le || stage_name)`,
//! and per-voxel draws use an independent counter-keyed stream so results do
//! not depend on traversal order or parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives the sub-seed for a named pipeline stage.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// A deterministic sequential RNG for a stage.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream keyed by `(seed, index)`. Streams with the same seed
/// and different indices never overlap, so per-voxel draws are identical
/// whether voxels are visited sequentially or in parallel.
pub fn indexed_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
