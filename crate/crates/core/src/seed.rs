//! Seed derivation.
//!
//! Every random draw in the benchmark comes from a ChaCha8 stream seeded with
//! `base ^ mix(parts)`, where `mix` folds the parts through the SplitMix64
//! finalizer. Derived seeds depend only on their inputs, never on thread
//! scheduling or call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a list of words.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a over bytes; used to turn string ids into seed words.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `base ^ mix(parts)`.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    base ^ mix(parts)
}

/// Seed for the occlusion of one query image.
///
/// `pair` is `Some(report_index)` only in the per-pair compatibility mode.
pub fn occlusion_seed(base: u64, image_index: usize, ratio_percent: f64, trial: usize, pair: Option<usize>) -> u64 {
    let pair_word = pair.map_or(u64::MAX, |p| p as u64);
    derive(
        base,
        &[image_index as u64, ratio_percent.to_bits(), trial as u64, pair_word],
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
