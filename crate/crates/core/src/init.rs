//! Weight initialisers.

use rand::Rng;

use crate::tensor::{Float, Tensor};

/// Uniform in `±scale * sqrt(6 / fan_in)` (He / Kaiming for ReLU layers).
pub fn kaiming_uniform<T: Float>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = scale * (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

/// Uniform in `±bound`.
pub fn uniform<T: Float>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        if bound == 0.0 {
            T::zero()
        } else {
            T::from_f64_lossy(rng.random_range(-bound..bound))
        }
    })
}
