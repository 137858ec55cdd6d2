//! Procedural class-conditioned images: one soft oriented bar per sample.
//!
//! Class `c` of `K` draws a bar at angle `π·c/K` through a jittered centre,
//! with seeded angle jitter, contrast and additive noise, clipped to `[0, 1]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub classes: usize,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Angle jitter as a fraction of the gap between class angles.
    pub angle_jitter: f64,
    /// Maximum centre shift in pixels.
    pub shift: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            classes: 10,
            size: 28,
            train_per_class: 50,
            test_per_class: 50,
            noise: 0.25,
            angle_jitter: 0.35,
            shift: 3.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.classes < 2 {
            errs.push(format!(
                "synthetic classes must be >= 2, got {}",
                self.classes
            ));
        }
        if self.size < 4 {
            errs.push(format!(
                "synthetic image size must be >= 4, got {}",
                self.size
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            errs.push("synthetic per-class counts must be positive".to_string());
        }
        if !(self.noise >= 0.0 && self.angle_jitter >= 0.0 && self.shift >= 0.0) {
            errs.push("synthetic noise, angle_jitter and shift must be nonnegative".to_string());
        }
        errs
    }
}

fn render(rng: &mut ChaCha8Rng, class: usize, p: &SynthParams, out: &mut Vec<f64>) {
    let h = p.size as f64;
    let gap = std::f64::consts::PI / p.classes as f64;
    let angle = class as f64 * gap + rng.gen_range(-1.0..=1.0) * p.angle_jitter * gap;
    let cx = (h - 1.0) / 2.0 + rng.gen_range(-1.0..=1.0) * p.shift;
    let cy = (h - 1.0) / 2.0 + rng.gen_range(-1.0..=1.0) * p.shift;
    let contrast = rng.gen_range(0.6..=1.0);
    let width = (h / 14.0).max(0.75);
    let half_len = h * rng.gen_range(0.3..=0.45);
    let (s, c) = angle.sin_cos();
    for y in 0..p.size {
        for x in 0..p.size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            let over = (along.abs() - half_len).max(0.0);
            let bar = contrast * (-(across * across + over * over) / (2.0 * width * width)).exp();
            let noise: f64 = rng.sample(StandardNormal);
            out.push((bar + p.noise * noise).clamp(0.0, 1.0));
        }
    }
}

/// `n_per_class · K` samples interleaved by class (`0, 1, …, K-1, 0, 1, …`).
pub fn synth_dataset<T: Real>(
    seed: u64,
    n_per_class: usize,
    params: &SynthParams,
    split: Split,
) -> Result<Dataset<T>> {
    let errs = params.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if n_per_class == 0 {
        return Err(Error::Config(vec![
            "synthetic per-class count must be positive".into(),
        ]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * params.classes;
    let mut pixels = Vec::with_capacity(n * params.size * params.size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for class in 0..params.classes {
            render(&mut rng, class, params, &mut pixels);
            labels.push(class);
        }
    }
    let images = Tensor::new(
        &[n, 1, params.size, params.size],
        pixels.into_iter().map(T::from_f64).collect(),
    )?;
    Dataset::new(images, labels, params.classes, split)
}

/// Train and test splits drawn from independent streams of one seed.
pub fn synth_splits<T: Real>(seed: u64, params: &SynthParams) -> Result<(Dataset<T>, Dataset<T>)> {
    let train = synth_dataset(
        seed.wrapping_mul(2),
        params.train_per_class,
        params,
        Split::Train,
    )?;
    let test = synth_dataset(
        seed.wrapping_mul(2).wrapping_add(1),
        params.test_per_class,
        params,
        Split::Test,
    )?;
    Ok((train, test))
}
