//! Seeded randomness helpers.
//!
//! Every stochastic choice in the crate flows through a `ChaCha8Rng` created
//! here, so a (seed, purpose) pair fully determines all generated data.
//! Per-item streams are derived by XOR-ing the run seed with the item id,
//! which keeps items independent of generation order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Array;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for item `id` under a run seed.
pub fn rng_for_item(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ id)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

pub fn gaussian_array(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, gaussian_vec(rng, n, std)).expect("shape/data agree by construction")
}

/// Uniform in `[lo, hi)`.
pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Caps the shared worker pool used by internally parallel stages (data
/// rendering). Must run before the pool's first use; a second call fails.
pub fn limit_worker_threads(n: usize) -> Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| e.to_string())
}
