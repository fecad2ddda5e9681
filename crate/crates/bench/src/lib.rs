//! Seeded inputs shared by the benchmarks.

use mkis_core::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Scores with a mild class separation and a ~10% positive rate.
pub fn scored_pixels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.1))).collect();
    let scores = gt.iter().map(|&g| rng.random::<f64>() + 0.4 * g as f64).collect();
    (scores, gt)
}
