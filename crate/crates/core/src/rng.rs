//! Seeded RNG streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(experiment seed, purpose, client, round)`. Streams are derived by mixing
//! the key through splitmix64, so the result does not depend on the order in
//! which clients are scheduled or on how many worker threads exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    Partition = 2,
    Split = 3,
    Init = 4,
    Selection = 5,
    LocalTrain = 6,
    Personalize = 7,
    Generator = 8,
    PostHoc = 9,
    Misc = 10,
}

/// Derives a 64-bit seed from a key tuple.
pub fn derive_seed(seed: u64, purpose: Purpose, client: u64, round: u64) -> u64 {
    let mut h = mix64(seed);
    h = mix64(h ^ (purpose as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    h = mix64(h ^ client.wrapping_mul(0x9FB2_1C65_1E98_DF25));
    mix64(h ^ round.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(seed: u64, purpose: Purpose, client: u64, round: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, purpose, client, round))
}
