use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

/// Source of standard-normal draws for reparameterized sampling.
#[derive(Clone, Debug)]
pub enum Noise {
    /// Every draw is exactly zero.
    Zero,
    /// Draws from a seeded stream.
    Seeded(ChaCha8Rng),
}

impl Noise {
    pub fn seeded(seed: u64) -> Self {
        Noise::Seeded(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Noise::Zero)
    }

    /// Tensor of `shape` filled with `N(0, 1)` draws.
    pub fn draw(&mut self, shape: &[usize]) -> Tensor {
        match self {
            Noise::Zero => Tensor::zeros(shape),
            Noise::Seeded(rng) => {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                Tensor::new(shape.to_vec(), data).expect("shape product")
            }
        }
    }
}
