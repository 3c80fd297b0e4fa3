//! Counter-based seed derivation.
//!
//! Every random draw in the toolkit comes from a ChaCha stream whose key is
//! derived from `(global seed, item index, lane)`. Any item can therefore be
//! regenerated in isolation, in any order, on any thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes that draw from the same `(seed, index)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Lane {
    Sample = 1,
    Shuffle = 2,
    Mask = 3,
    Init = 4,
    Batch = 5,
    Augment = 6,
    Surgery = 7,
    Dataset = 8,
    InitVision = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed for item `index` of `lane` under `global`.
pub fn derive(global: u64, index: u64, lane: Lane) -> u64 {
    let a = splitmix64(global ^ (lane as u64).rotate_left(48));
    splitmix64(a ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// ChaCha stream for a derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `stream(derive(global, index, lane))`.
pub fn keyed(global: u64, index: u64, lane: Lane) -> ChaCha8Rng {
    stream(derive(global, index, lane))
}
