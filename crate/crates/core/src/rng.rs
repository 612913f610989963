//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a root
//! seed and a stream label through [`derive_seed`], a splitmix64 hash. Streams
//! with different labels are independent for practical purposes, so parallel
//! sweeps reproduce regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const WIENER: u64 = 1;
pub const TONE_PHASE: u64 = 2;
pub const COUNTS: u64 = 3;
pub const LINK_CHANNEL: u64 = 10;
pub const RESIDUAL_CHANNEL: u64 = 11;
pub const BOOTSTRAP: u64 = 20;

/// splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: u64) -> u64 {
    splitmix64(root ^ splitmix64(stream))
}

pub fn stream(root: u64, label: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label))
}
