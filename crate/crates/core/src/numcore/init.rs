//! Deterministic parameter initialization.

use rand::Rng;

use super::Tensor;
use crate::Scalar;

/// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}
