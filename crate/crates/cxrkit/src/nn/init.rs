//! Seeded parameter initialization.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Conv2d;

/// Standard normal sample via Box-Muller; avoids pulling a distributions
/// dependency and keeps the stream layout explicit.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
        }
    }
}

/// Conv layer with Kaiming-normal weights (fan-in, ReLU gain) and zero bias.
pub fn conv2d(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Conv2d {
    let fan_in = (c_in * kernel.0 * kernel.1) as f64;
    let std = (2.0 / fan_in).sqrt() as f32;
    let weight = Array4::from_shape_simple_fn((c_out, c_in, kernel.0, kernel.1), || {
        standard_normal(rng) * std
    });
    let bias = Array1::zeros(c_out);
    Conv2d::new(weight, bias, stride, pad)
}

/// Square-kernel convenience wrapper.
pub fn conv2d_square(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Conv2d {
    conv2d(rng, c_in, c_out, (kernel, kernel), (stride, stride), (pad, pad))
}
