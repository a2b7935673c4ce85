//! Counter-based stream derivation.
//!
//! Every random stream in the crate is keyed by a tuple of integers
//! (seed, lane, step, index, ...) hashed into a ChaCha8 seed. A stream never
//! depends on how many draws other streams made, so results do not depend on
//! the order or thread in which virtual ranks execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes get distinct lanes so their streams never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Lane {
    TrainSample = 1,
    EvalSample = 2,
    GroundTruth = 3,
    EmbeddingInit = 4,
    DenseInit = 5,
    MonteCarlo = 6,
    Aux = 7,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a key tuple into one 64-bit value.
pub fn key(seed: u64, lane: Lane, parts: &[u64]) -> u64 {
    let mut h = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    h = mix64(h ^ lane as u64);
    for &p in parts {
        h = mix64(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ p);
    }
    h
}

/// A fresh generator for the stream identified by `(seed, lane, parts)`.
pub fn stream(seed: u64, lane: Lane, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, lane, parts))
}
