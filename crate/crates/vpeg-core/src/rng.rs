//! Seeded ChaCha streams and the scalar draws built on them.
//!
//! Every random quantity in the crate is drawn from a stream addressed by
//! (seed, domain, id), so sequences, rollout samples, and epochs can be
//! generated independently and in any order while staying bit-reproducible.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream namespaces. The domain tag occupies the top bits of the ChaCha
/// stream id, the caller-supplied id the low 48 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    SequenceGen = 1,
    Nuisance = 2,
    ParamInit = 3,
    SwapPairs = 4,
    TrainOrder = 5,
    RolloutNoise = 6,
    DiscriminatorPick = 7,
    RandomRetrieval = 8,
    EvalSubsets = 9,
}

pub fn stream(seed: u64, domain: Domain, id: u64) -> ChaCha8Rng {
    debug_assert!(id < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | id);
    rng
}

/// SplitMix64-style mixer for deriving sub-seeds from several components.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        state ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(23);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Uniform draw in [0, 1) with 53-bit resolution.
pub fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform integer in [0, n).
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    // Rejection-free modulo bias is negligible for the small n used here,
    // but keep it exact anyway with widening multiply.
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Standard normal via Box-Muller; consumes exactly two uniforms per call.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64); // (0, 1]
    let u2 = unit(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> alloc::vec::Vec<f64> {
    loop {
        let v: alloc::vec::Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Fisher-Yates draw of `k` distinct items from `pool` without replacement.
pub fn subset<T: Copy>(rng: &mut ChaCha8Rng, pool: &[T], k: usize) -> alloc::vec::Vec<T> {
    debug_assert!(k <= pool.len());
    let mut items = pool.to_vec();
    for i in 0..k {
        let j = i + below(rng, items.len() - i);
        items.swap(i, j);
    }
    items.truncate(k);
    items
}
