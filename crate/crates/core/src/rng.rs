//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by `(seed, purpose)` and positioned by an index, so results do not
//! depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the random streams used for different purposes under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    TrainSample = 1,
    EpochOrder = 2,
    TestSample = 3,
    ModelInit = 4,
    Secret = 5,
    Probe = 6,
    Stratified = 7,
    Verify = 8,
    Curriculum = 9,
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed, e.g. one per run in a multi-seed sweep.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix(mix(seed) ^ salt.rotate_left(17))
}

/// The stream for `(seed, purpose)` at position `index`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose as u64));
    rng.set_stream(index);
    rng
}
