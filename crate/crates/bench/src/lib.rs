//! Deterministic inputs shared by the benchmarks.

use hyperconv::{Tensor, PdeGrid};
use hyperconv::pde::Boundary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unit-variance activations `[batch, channels, size, size]`.
pub fn activations(batch: usize, channels: usize, size: usize) -> Tensor {
    Tensor::randn(&[batch, channels, size, size], 1.0, &mut rng(1))
}

/// Gaussian bump on a `size x size` unit-square grid at the largest stable
/// heat step.
pub fn heat_grid(size: usize) -> PdeGrid {
    let h = 1.0 / (size + 1) as f64;
    let g = PdeGrid::new(Tensor::zeros(&[1, size, size]), h, h * h / 4.0, Boundary::ZeroDirichlet)
        .expect("valid grid")
        .with_origin(h, h);
    g.with_field(g.sample(|x, y| (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.02).exp()))
}
