//! Reproducible random streams.
//!
//! Every stream is a xoshiro256++ generator whose 256-bit state is filled
//! from a 64-bit seed by four successive SplitMix64 outputs (the reference
//! seeding procedure for the xoshiro family). Derived sub-streams mix a
//! base seed with an index through one more SplitMix64 step, so sample `i`
//! of a dataset can be produced independently of samples `0..i`.
//!
//! Uniform floats are `(next_u64 >> 11) * 2^-53`, giving every other
//! implementation of the same algorithm identical sequences.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// One SplitMix64 output for state `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Uniform in `[0, 1)`.
pub fn unit(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform integer in `0..n`.
pub fn below(rng: &mut Rng, n: usize) -> usize {
    ((unit(rng) * n as f64) as usize).min(n.saturating_sub(1))
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    unit(rng) < p
}

/// Standard normal via Box-Muller (cosine branch only).
pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Normal with standard deviation `std`, resampled until within `±2·std`.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fisher-Yates shuffle driven by [`below`].
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
