//! Seeded Gaussian-mixture generators for tests, benches and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::DatasetMatrix;
use crate::error::Result;

/// `per_class` isotropic Gaussian samples around each center, labeled by
/// center index, classes interleaved in generation order.
pub fn gaussian_mixture(
    centers: &[Vec<f64>],
    per_class: usize,
    std: f64,
    seed: u64,
) -> Result<DatasetMatrix> {
    let d = centers.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let mut data = Vec::with_capacity(centers.len() * per_class * d);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            data.extend(center.iter().map(|&mu| mu + noise.sample(&mut rng)));
            labels.push(c as i32);
        }
    }
    DatasetMatrix::new(
        data,
        labels.len(),
        d,
        Some(labels),
        vec![d],
        format!("mixture-{seed}"),
    )
}

/// `k` centers drawn uniformly from `[-spread, spread]^d`.
pub fn random_centers(k: usize, d: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-spread..=spread)).collect())
        .collect()
}

/// A single isotropic blob of `n` points.
pub fn gaussian_blob(n: usize, d: usize, seed: u64) -> Result<DatasetMatrix> {
    gaussian_mixture(&[vec![0.0; d]], n, 1.0, seed)
}
