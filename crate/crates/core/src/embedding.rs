//! Low-dimensional embedding by gradient descent on the KL divergence
//! between the input affinities `P` and Student-t affinities `Q`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Backend, KernelConfig};
use crate::perplexity::{AffinityMatrix, PROBABILITY_FLOOR};

/// `N x d` coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub y: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl Embedding {
    pub fn new(y: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if y.len() != n * d || d == 0 {
            return Err(Error::Dimension(format!(
                "{} coordinates for {n} points in {d} dimensions",
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "embedding contains non-finite coordinates".into(),
            ));
        }
        Ok(Self {
            y,
            n,
            d,
            config_hash: String::new(),
            seed: 0,
        })
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.y[i * self.d..(i + 1) * self.d]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        for p in self.y.chunks_exact(self.d) {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.n as f64);
        mean
    }

    fn center(&mut self) {
        let mean = self.column_means();
        for p in self.y.chunks_exact_mut(self.d) {
            for (v, m) in p.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
}

/// Student-t (one degree of freedom) affinities of an embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LowDimAffinity {
    /// Normalized `q_ij = w_ij / z`.
    pub q: Vec<f64>,
    /// Kernel `w_ij = 1 / (1 + ||y_i - y_j||^2)`, zero on the diagonal.
    pub w: Vec<f64>,
    pub z: f64,
    /// `1 / z` as produced by the math backend; `q = w * inv_z` exactly.
    pub inv_z: f64,
    pub n: usize,
}

impl LowDimAffinity {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.n + j]
    }
}

/// Kernel `w` with zero diagonal and its total `z`. `(a - b)^2 == (b - a)^2`
/// exactly, so `w` is exactly symmetric.
fn student_t<R: Fn(f64) -> f64 + Sync>(y: &Embedding, recip: R) -> (Vec<f64>, f64) {
    let (n, d) = (y.n, y.d);
    let mut w = vec![0.0; n * n];
    w.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        if d == 2 {
            let (a0, a1) = (y.y[2 * i], y.y[2 * i + 1]);
            for (wij, b) in row.iter_mut().zip(y.y.chunks_exact(2)) {
                let (e0, e1) = (a0 - b[0], a1 - b[1]);
                *wij = recip(1.0 + (e0 * e0 + e1 * e1));
            }
        } else {
            let yi = y.point(i);
            for (wij, yj) in row.iter_mut().zip(y.y.chunks_exact(d)) {
                let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                *wij = recip(1.0 + d2);
            }
        }
        row[i] = 0.0;
    });
    let z = w.iter().sum();
    (w, z)
}

pub fn low_dim_affinities(y: &Embedding, math: KernelConfig) -> Result<LowDimAffinity> {
    let n = y.n;
    if n < 2 {
        return Err(Error::Dimension(format!(
            "Student-t affinities need N >= 2, got {n}"
        )));
    }
    let (w, z) = student_t(y, |x| math.recip(x));
    let inv_z = math.recip(z);
    let q = w.iter().map(|&v| v * inv_z).collect();
    Ok(LowDimAffinity { q, w, z, inv_z, n })
}

/// `sum_{i != j} p_ij ln(p_ij / q_ij)`, skipping `p_ij <= 1e-12`.
pub fn kl_divergence(p: &AffinityMatrix, q: &LowDimAffinity, math: KernelConfig) -> Result<f64> {
    if p.n() != q.n {
        return Err(Error::Dimension(format!(
            "P is {0}x{0} but Q is {1}x{1}",
            p.n(),
            q.n
        )));
    }
    let n = q.n;
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                let pij = p.get(i, j);
                if i != j && pij > PROBABILITY_FLOOR {
                    acc += pij * math.ln(math.div(pij, q.q[i * n + j]));
                }
            }
            acc
        })
        .collect();
    Ok(rows.iter().sum())
}

/// `dKL/dy_i = 4 sum_j (p_ij - q_ij) w_ij (y_i - y_j)`.
pub fn kl_gradient(p: &AffinityMatrix, qc: &LowDimAffinity, y: &Embedding) -> Result<Vec<f64>> {
    if p.n() != y.n || qc.n != y.n {
        return Err(Error::Dimension(format!(
            "P ({}), Q ({}) and Y ({}) disagree on N",
            p.n(),
            qc.n,
            y.n
        )));
    }
    Ok(sweep(p, 1.0, &qc.w, qc.inv_z, y, |_| 0.0).0)
}

/// One pass over `P` and `w`: the gradient with `P` scaled by
/// `exaggeration`, and `sum_{i<j} p_ij ln w_ij` over entries above the floor.
fn sweep<L: Fn(f64) -> f64 + Sync>(
    p: &AffinityMatrix,
    exaggeration: f64,
    w: &[f64],
    inv_z: f64,
    y: &Embedding,
    ln: L,
) -> (Vec<f64>, f64) {
    let (n, d) = (y.n, y.d);
    let pm = p.as_slice();
    let mut grad = vec![0.0; n * d];
    let cross: Vec<f64> = grad
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, g)| {
            let yi = y.point(i);
            let (prow, wrow) = (&pm[i * n..(i + 1) * n], &w[i * n..(i + 1) * n]);
            // Diagonal terms vanish: w_ii = 0 and y_i - y_i = 0.
            if d == 2 {
                let (mut g0, mut g1) = (0.0, 0.0);
                for ((&pij, &wij), yj) in prow.iter().zip(wrow).zip(y.y.chunks_exact(2)) {
                    let s = (exaggeration * pij - wij * inv_z) * wij;
                    g0 += s * (yi[0] - yj[0]);
                    g1 += s * (yi[1] - yj[1]);
                }
                g[0] = 4.0 * g0;
                g[1] = 4.0 * g1;
            } else {
                for ((&pij, &wij), yj) in prow.iter().zip(wrow).zip(y.y.chunks_exact(d)) {
                    let s = (exaggeration * pij - wij * inv_z) * wij;
                    for ((gk, a), b) in g.iter_mut().zip(yi).zip(yj) {
                        *gk += s * (a - b);
                    }
                }
                g.iter_mut().for_each(|v| *v *= 4.0);
            }
            let mut acc = 0.0;
            for (&pij, &wij) in prow[i + 1..].iter().zip(&wrow[i + 1..]) {
                if pij > PROBABILITY_FLOOR {
                    acc += pij * ln(wij);
                }
            }
            acc
        })
        .collect();
    (grad, cross.iter().sum())
}

/// Optimizer settings; defaults follow common t-SNE practice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub d: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum_early: f64,
    pub momentum_late: f64,
    pub momentum_switch_iter: usize,
    pub early_exaggeration_factor: f64,
    pub early_exaggeration_iters: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            d: 2,
            iterations: 1000,
            learning_rate: 200.0,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch_iter: 250,
            early_exaggeration_factor: 4.0,
            early_exaggeration_iters: 100,
            init_std: 1e-2,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("t-SNE needs at least one iteration".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for m in [self.momentum_early, self.momentum_late] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("momentum {m} outside [0, 1)")));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if !(self.early_exaggeration_factor > 0.0) {
            return Err(Error::Config("exaggeration factor must be positive".into()));
        }
        Ok(())
    }
}

/// KL divergence after every iteration, evaluated against the unexaggerated P.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub kl_per_iteration: Vec<f64>,
    pub iterations: usize,
    /// Number of leading iterations that ran with exaggerated P.
    pub exaggeration_end: usize,
}

impl LossTrace {
    pub fn final_kl(&self) -> f64 {
        self.kl_per_iteration.last().copied().unwrap_or(f64::NAN)
    }

    /// KL right after the exaggeration phase, if it ended before the run did.
    pub fn post_exaggeration_kl(&self) -> Option<f64> {
        (self.exaggeration_end > 0 && self.exaggeration_end < self.iterations)
            .then(|| self.kl_per_iteration[self.exaggeration_end - 1])
    }
}

/// KL split as `sum p ln p - 2 sum_{i<j} p ln w + mass ln z` over entries
/// above the floor. The first term and the mass depend on `P` only.
struct KlLog {
    plogp: f64,
    mass: f64,
}

impl KlLog {
    fn new<L: Fn(f64) -> f64>(p: &AffinityMatrix, ln: &L) -> Self {
        let (mut plogp, mut mass) = (0.0, 0.0);
        for (k, &v) in p.as_slice().iter().enumerate() {
            if k % (p.n() + 1) != 0 && v > PROBABILITY_FLOOR {
                plogp += v * ln(v);
                mass += v;
            }
        }
        Self { plogp, mass }
    }

    fn value(&self, cross: f64, ln_z: f64) -> f64 {
        self.plogp - 2.0 * cross + self.mass * ln_z
    }
}

/// Momentum gradient descent from a seeded `N(0, init_std^2)` start.
///
/// `kl_per_iteration[t]` is the unexaggerated KL after update `t`.
pub fn run_tsne(
    p: &AffinityMatrix,
    cfg: &TsneConfig,
    math: KernelConfig,
) -> Result<(Embedding, LossTrace)> {
    // Monomorphized per backend so the reference loops carry no dispatch.
    match math.backend {
        Backend::Reference => descend(p, cfg, |x| 1.0 / x, f64::ln),
        Backend::CordicNewton => descend(p, cfg, |x| math.recip(x), |x| math.ln(x)),
    }
}

fn descend<R, L>(
    p: &AffinityMatrix,
    cfg: &TsneConfig,
    recip: R,
    ln: L,
) -> Result<(Embedding, LossTrace)>
where
    R: Fn(f64) -> f64 + Sync,
    L: Fn(f64) -> f64 + Sync,
{
    cfg.validate()?;
    let (n, d) = (p.n(), cfg.d);
    if n < 2 {
        return Err(Error::Dimension(format!("embedding needs N >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, cfg.init_std).expect("validated init_std");
    let mut y = Embedding::new((0..n * d).map(|_| init.sample(&mut rng)).collect(), n, d)?;
    y.seed = cfg.seed;
    y.center();
    let mut prev = y.y.clone();
    let log = KlLog::new(p, &ln);
    let (mut w, mut z) = student_t(&y, &recip);
    let mut kl = Vec::with_capacity(cfg.iterations);
    let record = |kl: &mut Vec<f64>, cross: f64, z: f64, t: usize| {
        let loss = log.value(cross, ln(z));
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "KL divergence is {loss} at iteration {t}"
            )));
        }
        kl.push(loss);
        Ok(())
    };

    for t in 0..cfg.iterations {
        let exaggeration = if t < cfg.early_exaggeration_iters {
            cfg.early_exaggeration_factor
        } else {
            1.0
        };
        let momentum = if t < cfg.momentum_switch_iter {
            cfg.momentum_early
        } else {
            cfg.momentum_late
        };
        // The sweep at step t also yields the loss of update t - 1.
        let (grad, cross) = sweep(p, exaggeration, &w, recip(z), &y, &ln);
        if t > 0 {
            record(&mut kl, cross, z, t - 1)?;
        }
        for ((v, g), old) in y.y.iter_mut().zip(&grad).zip(prev.iter_mut()) {
            let next = *v - cfg.learning_rate * g + momentum * (*v - *old);
            *old = *v;
            *v = next;
        }
        y.center();
        if y.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite embedding coordinate at iteration {t}"
            )));
        }
        (w, z) = student_t(&y, &recip);
    }
    let (_, cross) = sweep(p, 1.0, &w, recip(z), &y, &ln);
    record(&mut kl, cross, z, cfg.iterations - 1)?;

    let trace = LossTrace {
        kl_per_iteration: kl,
        iterations: cfg.iterations,
        exaggeration_end: cfg.early_exaggeration_iters.min(cfg.iterations),
    };
    Ok((y, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perplexity::joint_affinities;
    use rand::Rng;

    const REF: KernelConfig = KernelConfig {
        cordic_iterations: 24,
        newton_iterations: 5,
        backend: crate::kernels::Backend::Reference,
    };

    fn random_embedding(n: usize, seed: u64) -> Embedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Embedding::new(
            (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
            n,
            2,
        )
        .unwrap()
    }

    fn random_p(n: usize, seed: u64) -> AffinityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                if i != j {
                    c[i * n + j] = rng.random_range(0.01..1.0);
                    s += c[i * n + j];
                }
            }
            for j in 0..n {
                c[i * n + j] /= s;
            }
        }
        joint_affinities(&c, n).unwrap()
    }

    /// Direct double-loop KL with the kernel recomputed from coordinates.
    fn kl_direct(p: &AffinityMatrix, y: &Embedding) -> f64 {
        let n = y.n;
        let kernel = |i: usize, j: usize| {
            let d: f64 = (0..y.d)
                .map(|k| (y.point(i)[k] - y.point(j)[k]).powi(2))
                .sum();
            1.0 / (1.0 + d)
        };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    z += kernel(i, j);
                }
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                let pij = p.get(i, j);
                if i != j && pij > PROBABILITY_FLOOR {
                    kl += pij * (pij / (kernel(i, j) / z)).ln();
                }
            }
        }
        kl
    }

    #[test]
    fn two_points_split_evenly() {
        let y = Embedding::new(vec![0.0, 0.0, 40.0, -3.0], 2, 2).unwrap();
        let q = low_dim_affinities(&y, REF).unwrap();
        assert_eq!(q.q, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn equilateral_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let y = Embedding::new(vec![0.0, 0.0, 1.0, 0.0, 0.5, h], 3, 2).unwrap();
        let q = low_dim_affinities(&y, REF).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((q.get(i, j) - 1.0 / 6.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn q_sums_to_one() {
        let q = low_dim_affinities(&random_embedding(20, 1), REF).unwrap();
        let total: f64 = q.q.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(q.get(i, j), q.get(j, i));
                if i != j {
                    assert!((q.q[i * 20 + j] - q.w[i * 20 + j] / q.z).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn kl_zero_when_p_equals_q() {
        let y = random_embedding(12, 2);
        let q = low_dim_affinities(&y, REF).unwrap();
        let p = AffinityMatrix::from_dense(q.q.clone(), 12).unwrap();
        assert!(kl_divergence(&p, &q, REF).unwrap().abs() < 1e-12);
        let g = kl_gradient(&p, &q, &y).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kl_positive_for_mismatch() {
        // all mass on the far pair (0, 2); the layout makes q near-uniform
        let n = 3;
        let mut dense = vec![PROBABILITY_FLOOR; n * n];
        dense[2] = 0.5 - 2.0 * PROBABILITY_FLOOR;
        dense[6] = 0.5 - 2.0 * PROBABILITY_FLOOR;
        for i in 0..n {
            dense[i * n + i] = 0.0;
        }
        let p = AffinityMatrix::from_dense(dense, n).unwrap();
        let y = Embedding::new(vec![0.0, 0.0, 0.1, 0.0, 0.2, 0.0], 3, 2).unwrap();
        let q = low_dim_affinities(&y, REF).unwrap();
        assert!(kl_divergence(&p, &q, REF).unwrap() > 0.1);
    }

    #[test]
    fn kl_matches_direct_loop() {
        let p = random_p(10, 3);
        let y = random_embedding(10, 4);
        let q = low_dim_affinities(&y, REF).unwrap();
        let a = kl_divergence(&p, &q, REF).unwrap();
        assert!((a - kl_direct(&p, &y)).abs() <= 1e-12);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let p = random_p(5, 3);
        let q = low_dim_affinities(&random_embedding(6, 1), REF).unwrap();
        assert!(matches!(
            kl_divergence(&p, &q, REF),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn two_point_gradient_antisymmetric() {
        let p = AffinityMatrix::from_dense(vec![0.0, 0.5, 0.5, 0.0], 2).unwrap();
        let y = Embedding::new(vec![0.3, -1.0, 2.0, 0.5], 2, 2).unwrap();
        let q = low_dim_affinities(&y, REF).unwrap();
        let g = kl_gradient(&p, &q, &y).unwrap();
        assert_eq!(g[0], -g[2]);
        assert_eq!(g[1], -g[3]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (n, h) = (8, 1e-5);
        let p = random_p(n, 5);
        let y = random_embedding(n, 6);
        let q = low_dim_affinities(&y, REF).unwrap();
        let g = kl_gradient(&p, &q, &y).unwrap();
        for (k, &gk) in g.iter().enumerate() {
            let mut plus = y.clone();
            let mut minus = y.clone();
            plus.y[k] += h;
            minus.y[k] -= h;
            let fd = (kl_direct(&p, &plus) - kl_direct(&p, &minus)) / (2.0 * h);
            assert!(
                (gk - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                "k={k}: {gk} vs {fd}"
            );
        }
    }

    #[test]
    fn gradient_sums_to_zero() {
        let p = random_p(9, 7);
        let y = random_embedding(9, 8);
        let q = low_dim_affinities(&y, REF).unwrap();
        let g = kl_gradient(&p, &q, &y).unwrap();
        for k in 0..2 {
            let s: f64 = (0..9).map(|i| g[i * 2 + k]).sum();
            assert!(s.abs() <= 1e-8);
        }
    }

    #[test]
    fn tiny_step_keeps_initialization() {
        let p = random_p(15, 9);
        let cfg = TsneConfig {
            iterations: 1,
            learning_rate: 1e-12,
            seed: 3,
            ..TsneConfig::default()
        };
        let (y, trace) = run_tsne(&p, &cfg, REF).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = Normal::new(0.0, cfg.init_std).unwrap();
        let mut start =
            Embedding::new((0..30).map(|_| init.sample(&mut rng)).collect(), 15, 2).unwrap();
        start.center();
        for (a, b) in y.y.iter().zip(&start.y) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(y.column_means().iter().all(|m| m.abs() < 1e-9));
        assert_eq!(trace.kl_per_iteration.len(), 1);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let p = random_p(20, 10);
        let cfg = TsneConfig {
            iterations: 60,
            seed: 11,
            ..TsneConfig::default()
        };
        let a = run_tsne(&p, &cfg, REF).unwrap();
        let b = run_tsne(&p, &cfg, REF).unwrap();
        assert_eq!(a, b);
        assert!(a.0.column_means().iter().all(|m| m.abs() < 1e-9));
    }

    #[test]
    fn logged_kl_matches_definition() {
        let p = random_p(25, 12);
        for math in [REF, KernelConfig::cordic_newton()] {
            let cfg = TsneConfig {
                iterations: 40,
                seed: 3,
                ..TsneConfig::default()
            };
            let (y, trace) = run_tsne(&p, &cfg, math).unwrap();
            let q = low_dim_affinities(&y, math).unwrap();
            let direct = kl_divergence(&p, &q, math).unwrap();
            assert!((trace.final_kl() - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn single_point_has_no_affinities() {
        let y = Embedding::new(vec![0.0, 0.0], 1, 2).unwrap();
        assert!(matches!(
            low_dim_affinities(&y, REF),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn config_validation() {
        let ok = TsneConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TsneConfig {
            iterations: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(TsneConfig {
            learning_rate: 0.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(TsneConfig {
            momentum_late: 1.0,
            ..ok
        }
        .validate()
        .is_err());
    }
}
