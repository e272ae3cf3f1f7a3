//! Deterministic seed derivation.
//!
//! Every stochastic component (shuffling, dropout, position shift, flips,
//! negative sampling) draws from a ChaCha stream derived from the run seed,
//! a purpose tag and an epoch number. Streams are independent of execution
//! history, which is what makes checkpoint-resume bitwise-equal to an
//! uninterrupted run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable 64-bit hash of a string, used for config hashes and stream tags.
pub fn hash_str(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}

/// RNG for a (seed, purpose) pair, independent of any other stream.
pub fn stream_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    epoch_rng(seed, tag, 0)
}

/// RNG for a (seed, purpose, epoch) triple.
pub fn epoch_rng(seed: u64, tag: &str, epoch: u64) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    s = splitmix64(s ^ fnv1a(tag.as_bytes()));
    s = splitmix64(s ^ epoch);
    ChaCha8Rng::seed_from_u64(s)
}
