use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Real;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `len` draws from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
///
/// Sampling happens in `f64`, so `f32` and `f64` parameters drawn from the
/// same seed agree up to rounding.
pub fn init_params<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect()
}
