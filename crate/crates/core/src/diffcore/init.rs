use rand::Rng;

use crate::diffcore::{Scalar, Tensor};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..limit)))
}

/// Glorot-uniform for a `[kh, kw, d_in, d_out]` kernel using receptive-field fans.
pub fn conv_kernel<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let rf = shape[0] * shape[1];
    glorot_uniform(&shape, rf * shape[2], rf * shape[3], rng)
}
