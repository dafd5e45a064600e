//! Two-dimensional toy data for exercising flows on a known density.

use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// `n` points from the two interleaved half-moons, standardized to roughly
/// zero mean and unit scale, with isotropic Gaussian `noise`. Returned as
/// `n × 1 × 1 × 2` so a flow without squeezing can model it.
pub fn two_moons(n: usize, noise: f64, rng: &mut SeededRng) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let (x, y) = if i % 2 == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        // Center (0.5, 0.25) and scale the ±1.5 × ±1 extent down.
        data.push((x - 0.5) / 0.85 + noise * rng.normal());
        data.push((y - 0.25) / 0.5 + noise * rng.normal());
    }
    Tensor::from_parts(vec![n, 1, 1, 2], data)
}
