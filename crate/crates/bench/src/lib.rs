//! Deterministic inputs shared by the benchmarks in `benches/`.

use aliascope::nn::Tensor;
use aliascope::RealGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = rng(seed);
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn grid(seed: u64, m: usize, n: usize) -> RealGrid {
    let mut rng = rng(seed);
    RealGrid::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)).expect("non-empty grid")
}

pub fn images(seed: u64, dims: [usize; 4]) -> Tensor<f32> {
    Tensor::new(dims, uniform(seed, dims.iter().product())).expect("matching length")
}

pub fn labels(count: usize, n_classes: usize) -> Vec<usize> {
    (0..count).map(|i| (i * 7) % n_classes).collect()
}
