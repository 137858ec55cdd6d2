use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

/// Seeded parameter initializer. Values are drawn in `f64` and cast, so a
/// 32-bit and a 64-bit model built from one seed agree up to rounding.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    pub fn kaiming<T: Real>(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let std = (gain / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| {
            let z: f64 = self.rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.rng.gen_range(-bound..bound)))
    }
}
