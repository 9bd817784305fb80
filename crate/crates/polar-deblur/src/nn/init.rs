//! Parameter initialization.

use super::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Xavier/Glorot uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
///
/// Sampling goes through `f64` so the stream of draws is identical whatever
/// the parameter tensor layout.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32)
        .collect();
    Tensor::from_vec(shape, data)
}

/// Conv-layer fan counts for a `[Cout, Cin, K, K]` weight.
pub fn conv_fans(shape: Shape) -> (usize, usize) {
    let receptive = shape.h * shape.w;
    (shape.c * receptive, shape.n * receptive)
}
