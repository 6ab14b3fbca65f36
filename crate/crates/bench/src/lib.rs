//! Shared fixtures for the criterion benches.

use desne::distance::pairwise_sq_dist;
use desne::perplexity::{affinities, BinarySearch};
use desne::synthetic::{gaussian_mixture, random_centers};
use desne::{AffinityMatrix, DatasetMatrix, DistanceMatrix, KernelConfig};

/// Ten-class mixture with `n` points (rounded down to a multiple of 10).
pub fn mixture(n: usize, d: usize, seed: u64) -> DatasetMatrix {
    let centers = random_centers(10, d, 5.0, seed);
    gaussian_mixture(&centers, n / 10, 1.0, seed ^ 1).expect("valid mixture")
}

pub fn distances(n: usize, d: usize, seed: u64) -> DistanceMatrix {
    pairwise_sq_dist(&mixture(n, d, seed)).expect("finite distances")
}

/// Joint affinities at perplexity 15, calibrated by bisection.
pub fn joint(n: usize, d: usize, seed: u64) -> AffinityMatrix {
    let d2 = distances(n, d, seed);
    affinities(
        &d2,
        15.0,
        &BinarySearch::default(),
        seed,
        KernelConfig::reference(),
    )
    .expect("calibrated")
    .1
}
