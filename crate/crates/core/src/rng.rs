//! Seed derivation.
//!
//! Every random stream in a run is derived from one 64-bit master seed by
//! mixing it with a stream label through SplitMix64. Streams never share
//! state, so the order in which components consume randomness does not
//! affect any other component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named streams used by the training and sampling code.
pub mod stream {
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const TRAIN_DRAWS: u64 = 0x4452_4157;
    pub const VALIDATION: u64 = 0x5641_4c49;
    pub const SAMPLING: u64 = 0x5341_4d50;
    pub const DATA: u64 = 0x4441_5441;
}

/// One SplitMix64 output step applied to `state`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `label` under `seed`.
pub fn derive(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ label)
}

/// Child seed for a path of labels, e.g. `[SAMPLING, window, draw]`.
pub fn derive_path(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(seed, |s, &l| derive(s, l))
}

pub fn stream_rng(seed: u64, label: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, label))
}

pub fn path_rng(seed: u64, labels: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_path(seed, labels))
}
