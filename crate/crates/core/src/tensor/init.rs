use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::rng::Rng;

/// Uniform on `[-b, b]` with `b = sqrt(6 / fan_in)`, `fan_in = shape[0]`.
pub fn init_kaiming_uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    let bound = (6.0 / shape[0] as f64).sqrt();
    init_uniform(shape, -bound, bound, rng)
}

pub fn init_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("sized")
}

pub fn init_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("sized")
}
