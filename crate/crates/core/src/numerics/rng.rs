//! Seedable random number generation.
//!
//! All randomness goes through [`Rng`], ChaCha with 8 rounds
//! (`rand_chacha::ChaCha8Rng`) seeded with `seed_from_u64`, so fixtures
//! are reproducible from a single `u64`.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::c(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

pub fn normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::c(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

/// Normal samples with standard deviation `std`, resampled until they
/// fall within two standard deviations of zero.
pub fn trunc_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::c(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}
