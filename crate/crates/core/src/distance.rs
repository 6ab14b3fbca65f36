//! Squared-Euclidean distance matrices.
//!
//! The production path decomposes `||x_i - x_j||^2` into
//! `||x_i||^2 + ||x_j||^2 - 2 <x_i, x_j>`: a row-norm vector and a Gram
//! matrix computed in square tiles. [`pairwise_sq_dist_naive`] is the direct
//! per-pair loop kept as a reference.

use rayon::prelude::*;

use crate::dataset::DatasetMatrix;
use crate::error::{Error, Result};

/// Tile edge of the Gram computation (the accelerator uses a 64-wide array).
pub const DEFAULT_TILE: usize = 64;

/// Round-off tolerance below zero that is clamped silently, relative to
/// `max(1, ||x_i||^2 + ||x_j||^2)`. Anything more negative is a bug.
const NEGATIVE_TOLERANCE: f64 = 1e-6;

/// Dense symmetric `N x N` matrix of squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d2: Vec<f64>,
    n: usize,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d2[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d2[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d2
    }

    /// Bytes needed to materialize an `n x n` matrix.
    pub fn memory_bytes(n: usize) -> usize {
        8 * n * n
    }
}

/// `out[i] = sum_k rows[i][k]^2` for a row-major `rows x cols` slice.
pub fn row_norms_of(data: &[f64], cols: usize) -> Vec<f64> {
    data.chunks_exact(cols)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect()
}

pub fn row_norms(m: &DatasetMatrix) -> Vec<f64> {
    row_norms_of(m.data(), m.d())
}

/// `data * data^T` for a row-major `n x cols` slice, computed tile by tile.
///
/// Every entry is a single dot product accumulated in feature order, so the
/// result does not depend on the tile size or on how tiles are scheduled.
pub fn gram_of(data: &[f64], cols: usize, tile: usize) -> Vec<f64> {
    let tile = tile.max(1);
    let n = data.len() / cols;
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(tile * n)
        .enumerate()
        .for_each(|(bi, block)| {
            let i0 = bi * tile;
            let rows = block.len() / n;
            for j0 in (0..n).step_by(tile) {
                let j1 = (j0 + tile).min(n);
                for di in 0..rows {
                    let xi = &data[(i0 + di) * cols..(i0 + di + 1) * cols];
                    let out_row = &mut block[di * n..(di + 1) * n];
                    for (j, slot) in out_row.iter_mut().enumerate().take(j1).skip(j0) {
                        let xj = &data[j * cols..(j + 1) * cols];
                        *slot = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
                    }
                }
            }
        });
    out
}

pub fn gram(m: &DatasetMatrix, tile: usize) -> Vec<f64> {
    gram_of(m.data(), m.d(), tile)
}

/// Decomposed distance matrix for a row-major `n x cols` slice.
pub fn pairwise_sq_dist_of(data: &[f64], cols: usize, tile: usize) -> Result<DistanceMatrix> {
    let norms = row_norms_of(data, cols);
    let mut d2 = gram_of(data, cols, tile);
    let n = norms.len();
    let worst = d2
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let mut worst: Option<(usize, f64)> = None;
            for (j, v) in row.iter_mut().enumerate() {
                if i == j {
                    *v = 0.0;
                    continue;
                }
                let d = norms[i] + norms[j] - 2.0 * *v;
                if d < 0.0 {
                    let scale = (norms[i] + norms[j]).max(1.0);
                    if d < -NEGATIVE_TOLERANCE * scale && worst.is_none_or(|(_, w)| d < w) {
                        worst = Some((j, d));
                    }
                    *v = 0.0;
                } else {
                    *v = d;
                }
            }
            worst.map(|(j, d)| (i, j, d))
        })
        .collect::<Vec<_>>();
    if let Some((i, j, d)) = worst.into_iter().flatten().next() {
        return Err(Error::Invariant(format!(
            "squared distance ({i}, {j}) evaluated to {d:e}; cancellation exceeds tolerance"
        )));
    }
    Ok(DistanceMatrix { d2, n })
}

pub fn pairwise_sq_dist(m: &DatasetMatrix) -> Result<DistanceMatrix> {
    pairwise_sq_dist_of(m.data(), m.d(), DEFAULT_TILE)
}

/// Reference implementation: direct `O(N^2 D)` loop over pairs.
pub fn pairwise_sq_dist_naive_of(data: &[f64], cols: usize) -> DistanceMatrix {
    let n = data.len() / cols;
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d2[i * n + j] = data[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(&data[j * cols..(j + 1) * cols])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
    }
    DistanceMatrix { d2, n }
}

pub fn pairwise_sq_dist_naive(m: &DatasetMatrix) -> DistanceMatrix {
    pairwise_sq_dist_naive_of(m.data(), m.d())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> DatasetMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        DatasetMatrix::new(data, n, d, None, vec![], "rand").unwrap()
    }

    #[test]
    fn norms() {
        let m = DatasetMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]], "t").unwrap();
        assert_eq!(row_norms(&m), vec![25.0, 0.0]);

        let r = random(50, 10, 1);
        let norms = row_norms(&r);
        for (i, got) in norms.iter().enumerate() {
            let mut want = 0.0;
            for k in 0..10 {
                want += r.row(i)[k] * r.row(i)[k];
            }
            assert!((got - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn gram_small_cases() {
        let id = DatasetMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], "t").unwrap();
        assert_eq!(gram(&id, 64), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gram_of(&[2.0, 2.0], 2, 64), vec![8.0]);
    }

    #[test]
    fn gram_tile_independent() {
        let r = random(30, 7, 2);
        let a = gram(&r, 1);
        let b = gram(&r, 64);
        let c = gram(&r, 7);
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            assert!((x - y).abs() <= 1e-10 && (x - z).abs() <= 1e-10);
        }
    }

    #[test]
    fn one_dimensional_pair() {
        let m = DatasetMatrix::from_rows(&[vec![0.0], vec![3.0]], "t").unwrap();
        let d = pairwise_sq_dist(&m).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 9.0, 9.0, 0.0]);
        assert_eq!(pairwise_sq_dist_naive(&m).as_slice(), d.as_slice());
    }

    #[test]
    fn duplicates_and_diagonal_points() {
        let m = DatasetMatrix::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7], vec![1.0, 1.0]], "t")
            .unwrap();
        let d = pairwise_sq_dist(&m).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        let p = DatasetMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]], "t").unwrap();
        assert_eq!(pairwise_sq_dist_naive(&p).get(0, 1), 2.0);
        assert_eq!(
            pairwise_sq_dist_naive_of(&[1.0, 2.0, 3.0], 3).as_slice(),
            &[0.0]
        );
    }

    #[test]
    fn decomposed_matches_naive() {
        let r = random(40, 12, 3);
        let a = pairwise_sq_dist(&r).unwrap();
        let b = pairwise_sq_dist_naive(&r);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-8);
        }
    }

    proptest! {
        #[test]
        fn invariants(n in 2usize..24, d in 1usize..9, seed in any::<u64>()) {
            let r = random(n, d, seed);
            let dm = pairwise_sq_dist(&r).unwrap();
            for i in 0..n {
                prop_assert_eq!(dm.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert!(dm.get(i, j) >= 0.0);
                    prop_assert!((dm.get(i, j) - dm.get(j, i)).abs() <= 1e-9);
                    for k in 0..n {
                        prop_assert!(
                            dm.get(i, k).sqrt() <= dm.get(i, j).sqrt() + dm.get(j, k).sqrt() + 1e-6
                        );
                    }
                }
            }
        }

        #[test]
        fn permutation_equivariant(n in 2usize..16, seed in any::<u64>()) {
            let r = random(n, 3, seed);
            let perm: Vec<usize> = (0..n).rev().collect();
            let p = r.subset(&perm).unwrap();
            let a = pairwise_sq_dist(&r).unwrap();
            let b = pairwise_sq_dist(&p).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((b.get(i, j) - a.get(perm[i], perm[j])).abs() <= 1e-12);
                }
            }
        }
    }
}
