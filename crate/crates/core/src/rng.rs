//! Seeded random streams.
//!
//! All randomness in the crate flows through [`LabRng`], a ChaCha8 generator.
//! A `(seed, stream)` pair names an independent sequence, so concurrent
//! trainers or checks can each own a stream without sharing state. ChaCha
//! output is specified bit-for-bit, which keeps experiments reproducible
//! across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream 0 of `seed`.
pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut LabRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Vector of uniform draws in `[lo, hi)`.
pub fn uniform_vec(rng: &mut LabRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, lo, hi)).collect()
}

/// Inverse-CDF draw of an index from `probs` (assumed normalized).
///
/// Falls back to the last index with positive mass when accumulated rounding
/// leaves `u` above the final cumulative sum.
pub fn draw_index(rng: &mut LabRng, probs: &[f64]) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}
