//! Weight initialisers.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::Tensor;

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], rng: &mut dyn RngCore) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

/// He/Kaiming normal for ReLU networks, fan-out mode.
pub fn kaiming_normal(shape: &[usize], rng: &mut dyn RngCore) -> Tensor {
    let (_, fan_out) = fans(shape);
    let std = (2.0 / fan_out.max(1) as f64).sqrt() as f32;
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual bias initialiser.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let a = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}
