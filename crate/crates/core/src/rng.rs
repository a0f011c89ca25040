//! Seeded randomness.
//!
//! Every random draw in the crate comes from a SplitMix64 stream
//! (Steele, Lea & Flood constants):
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! The state is initialised with the seed itself. Bounded integers use the
//! multiply-shift reduction `(out * n) >> 64` and unit floats take the top
//! 53 bits, so shuffles and splits are reproducible from the constants above
//! in any language.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::SplitMix64;

/// Fresh generator whose state is `seed`.
pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Uniform integer in `0..n` (multiply-shift). `n` must be nonzero.
pub fn below(rng: &mut SplitMix64, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Uniform float in `[0, 1)` from the top 53 bits.
pub fn unit(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform float in `[lo, hi)`.
pub fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

pub fn standard_normal(rng: &mut SplitMix64) -> f64 {
    StandardNormal.sample(rng)
}

/// Derive an independent sub-seed for `stream` from `master`.
///
/// The pair is folded into one word and passed through a single SplitMix64
/// output, so neighbouring masters or streams give unrelated seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let folded = master ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17);
    rng(folded).next_u64()
}

/// Fisher–Yates shuffle, walking `i` from the end and swapping with
/// `below(i + 1)`.
pub fn shuffle<T>(rng: &mut SplitMix64, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
