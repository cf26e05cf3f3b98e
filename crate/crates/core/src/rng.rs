//! Seed splitting.
//!
//! Every random stream in the simulator is a ChaCha8 generator seeded from a
//! master seed through [`derive_seed`], a SplitMix64 finalizer over
//! `seed ⊕ golden·(label + 1)`. A sweep point, trial or element can
//! therefore be re-run in isolation from `(master seed, labels...)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `label` under `seed`.
#[inline]
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ GOLDEN.wrapping_mul(label.wrapping_add(1)))
}

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}
