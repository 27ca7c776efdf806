//! Input generators shared by the benchmarks.

use curate_core::autodiff::Tensor;
use curate_core::rng::rng_from;
use rand_distr::{Distribution, StandardNormal};

/// A tensor of standard normal draws.
pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
