//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

/// Normal(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(T::of(z * std));
        }
    }
    Tensor::new(shape, data).expect("length matches shape")
}
