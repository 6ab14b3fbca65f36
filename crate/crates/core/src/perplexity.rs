//! High-dimensional affinities and per-point bandwidth calibration.
//!
//! Each row `i` gets a Gaussian bandwidth `sigma_i` such that the perplexity
//! `2^H` of the conditional distribution `p_{.|i}` matches a target. The
//! search is pluggable through [`SigmaSearch`]: bisection (the classic
//! approach), differential evolution, and simulated annealing.

use std::f64::consts::LOG2_E;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::kernels::KernelConfig;

/// Search interval for sigma shared by all optimizers.
pub const SIGMA_LB: f64 = 1e-20;
pub const SIGMA_UB: f64 = 1000.0;
pub const DEFAULT_PERPLEXITY: f64 = 15.0;

/// Joint probabilities below this are raised to it before renormalizing.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Conditional rows must sum to one within this before symmetrization.
const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// One row of the distance matrix prepared for repeated perplexity
/// evaluation: self excluded, shifted so the nearest neighbor sits at 0.
pub struct PerplexityRow {
    shifted: Vec<f64>,
    self_index: usize,
    math: KernelConfig,
}

impl PerplexityRow {
    pub fn new(d2_row: &[f64], i: usize, math: KernelConfig) -> Result<Self> {
        if i >= d2_row.len() {
            return Err(Error::Dimension(format!(
                "row index {i} outside row of length {}",
                d2_row.len()
            )));
        }
        let neighbors = d2_row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &d)| d);
        let mut min = f64::INFINITY;
        for d in neighbors.clone() {
            if d.is_nan() {
                return Err(Error::Numeric(format!("row {i} contains NaN distances")));
            }
            min = min.min(d);
        }
        if !min.is_finite() {
            return Err(Error::Numeric(format!(
                "row {i} has no finite neighbor distance"
            )));
        }
        Ok(Self {
            shifted: neighbors.map(|d| d - min).collect(),
            self_index: i,
            math,
        })
    }

    pub fn neighbors(&self) -> usize {
        self.shifted.len()
    }

    /// Neighbor probabilities in column order with self omitted.
    fn fill_probabilities(&self, sigma: f64, out: &mut [f64]) {
        let m = &self.math;
        let beta = m.recip(2.0 * sigma * sigma);
        let mut sum = 0.0;
        for (o, &d) in out.iter_mut().zip(&self.shifted) {
            *o = m.exp(-d * beta);
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = m.div(*o, sum);
        }
    }

    /// Full conditional row with a zero at the self position.
    pub fn probabilities(&self, sigma: f64) -> Vec<f64> {
        let mut neigh = vec![0.0; self.shifted.len()];
        self.fill_probabilities(sigma, &mut neigh);
        let mut out = Vec::with_capacity(neigh.len() + 1);
        out.extend_from_slice(&neigh[..self.self_index]);
        out.push(0.0);
        out.extend_from_slice(&neigh[self.self_index..]);
        out
    }

    /// Perplexity at `sigma` through the closed form
    /// `H = log2 S + beta * (sum d_j e_j) / S * log2 e`, one exponential per
    /// neighbor and no per-entry logarithm.
    pub fn perplexity(&self, sigma: f64) -> f64 {
        let m = &self.math;
        let beta = m.recip(2.0 * sigma * sigma);
        let (mut sum, mut weighted) = (0.0, 0.0);
        for &d in &self.shifted {
            let e = m.exp(-d * beta);
            sum += e;
            weighted += d * e;
        }
        let h = m.log2(sum) + beta * m.div(weighted, sum) * LOG2_E;
        m.exp2(h)
    }
}

fn perplexity_of(p: &[f64], m: &KernelConfig) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * m.log2(v))
        .sum();
    m.exp2(h)
}

/// `p_{j|i}` for all j, with `p_{i|i} = 0`.
pub fn conditional_row(
    d2_row: &[f64],
    i: usize,
    sigma: f64,
    math: KernelConfig,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok(PerplexityRow::new(d2_row, i, math)?.probabilities(sigma))
}

/// `2^H` with `H = -sum p log2 p`; zero entries contribute nothing.
pub fn row_perplexity(p_row: &[f64], math: KernelConfig) -> f64 {
    perplexity_of(p_row, &math)
}

/// Result of calibrating one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSolution {
    pub sigma: f64,
    /// `|achieved perplexity - target|`.
    pub error: f64,
    pub evals: u64,
}

/// A bandwidth search strategy.
pub trait SigmaSearch: Sync {
    fn tag(&self) -> &'static str;
    fn bounds(&self) -> (f64, f64);
    fn solve(&self, row: &PerplexityRow, target: f64, seed: u64) -> RowSolution;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DEConfig {
    pub f_weight: f64,
    pub cr: f64,
    pub pop_size: usize,
    pub max_iter: usize,
    pub epsilon: f64,
    pub lb: f64,
    pub ub: f64,
    pub seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        Self {
            f_weight: 0.5,
            cr: 0.7,
            pop_size: 30,
            max_iter: 10_000,
            epsilon: 1e-10,
            lb: SIGMA_LB,
            ub: SIGMA_UB,
            seed: 0,
        }
    }
}

impl DEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cr > 0.0 && self.cr <= 1.0) {
            return Err(Error::Config(format!(
                "CR must be in (0, 1], got {}",
                self.cr
            )));
        }
        if !(self.f_weight > 0.0 && self.f_weight < 2.0) {
            return Err(Error::Config(format!(
                "F must be in (0, 2), got {}",
                self.f_weight
            )));
        }
        if !(self.lb < self.ub) || !self.lb.is_finite() || !self.ub.is_finite() {
            return Err(Error::Config(format!(
                "bounds must satisfy lb < ub, got [{}, {}]",
                self.lb, self.ub
            )));
        }
        if self.pop_size < 4 {
            return Err(Error::Config(format!(
                "population must hold at least 4 individuals, got {}",
                self.pop_size
            )));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeOutcome {
    pub best: f64,
    pub best_error: f64,
    pub evals: u64,
    pub generations: usize,
}

/// Differential evolution on a scalar genome, minimizing
/// `|objective(x) - target|` over `[lb, ub]`.
///
/// Mutation `a + F (b - c)` from three distinct other members, clipped to the
/// bounds; crossover takes the mutant with probability CR; greedy
/// replacement. A trial equal to its parent is not re-evaluated. Stops after
/// `max_iter` generations, once the best error is within `epsilon`, or when
/// every member is identical (no move can change the population any more).
pub fn de_optimize<F>(mut objective: F, target: f64, cfg: &DEConfig) -> DeOutcome
where
    F: FnMut(f64) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let np = cfg.pop_size;
    let mut pop: Vec<f64> = (0..np).map(|_| rng.random_range(cfg.lb..=cfg.ub)).collect();
    let mut err: Vec<f64> = pop.iter().map(|&x| (objective(x) - target).abs()).collect();
    let mut evals = np as u64;

    let mut best_idx = 0;
    for k in 1..np {
        if err[k] < err[best_idx] {
            best_idx = k;
        }
    }
    let mut best = pop[best_idx];
    let mut best_error = err[best_idx];
    let mut generations = 0;

    while generations < cfg.max_iter && !(best_error <= cfg.epsilon) {
        // A fully collapsed population can only reproduce itself.
        if pop.iter().all(|&v| v == pop[0]) {
            break;
        }
        generations += 1;
        for i in 0..np {
            let picks = index::sample(&mut rng, np - 1, 3);
            let other = |k: usize| if k >= i { k + 1 } else { k };
            let (a, b, c) = (
                pop[other(picks.index(0))],
                pop[other(picks.index(1))],
                pop[other(picks.index(2))],
            );
            let mutant = (a + cfg.f_weight * (b - c)).clamp(cfg.lb, cfg.ub);

            // Without crossover the trial is the parent and cannot win.
            if rng.random::<f64>() >= cfg.cr {
                continue;
            }
            let trial = mutant;

            let trial_error = (objective(trial) - target).abs();
            evals += 1;
            if trial_error < err[i] {
                pop[i] = trial;
                err[i] = trial_error;
                if trial_error < best_error {
                    best = trial;
                    best_error = trial_error;
                }
            }
        }
    }

    DeOutcome {
        best,
        best_error,
        evals,
        generations,
    }
}

/// Coordinate in which the DE genome lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchSpace {
    /// Genome is sigma itself, drawn and clipped in `[lb, ub]`.
    Linear,
    /// Genome is `ln sigma`, drawn and clipped in `[ln lb, ln ub]`.
    #[default]
    Log,
}

impl fmt::Display for SearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchSpace::Linear => "linear",
            SearchSpace::Log => "log",
        })
    }
}

impl FromStr for SearchSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "log" => Ok(Self::Log),
            other => Err(Error::Config(format!("unknown DE search space {other:?}"))),
        }
    }
}

/// Differential-evolution sigma search.
///
/// With the default [`SearchSpace::Log`] the population spans the twenty-odd
/// decades between `lb` and `ub` evenly. In linear space almost every initial
/// member lands in the saturated region `sigma >> sigma*`, and mutants
/// clipped to `lb` (perplexity 1) win the greedy selection, so the population
/// collapses onto the lower bound whenever `sigma*` is small compared to `ub`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DifferentialEvolution {
    pub config: DEConfig,
    pub space: SearchSpace,
}

impl DifferentialEvolution {
    pub fn new(config: DEConfig) -> Self {
        Self {
            config,
            space: SearchSpace::default(),
        }
    }
}

impl SigmaSearch for DifferentialEvolution {
    fn tag(&self) -> &'static str {
        "de"
    }

    fn bounds(&self) -> (f64, f64) {
        (self.config.lb, self.config.ub)
    }

    fn solve(&self, row: &PerplexityRow, target: f64, seed: u64) -> RowSolution {
        let cfg = DEConfig {
            seed,
            ..self.config
        };
        let (lb, ub) = (cfg.lb, cfg.ub);
        let (out, sigma) = match self.space {
            SearchSpace::Linear => {
                let out = de_optimize(|s| row.perplexity(s), target, &cfg);
                (out, out.best)
            }
            SearchSpace::Log => {
                let log_cfg = DEConfig {
                    lb: lb.ln(),
                    ub: ub.ln(),
                    ..cfg
                };
                let out = de_optimize(|u| row.perplexity(u.exp().clamp(lb, ub)), target, &log_cfg);
                (out, out.best.exp().clamp(lb, ub))
            }
        };
        RowSolution {
            sigma,
            error: out.best_error,
            evals: out.evals,
        }
    }
}

/// Bisection on sigma over a fixed interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarySearch {
    pub iters: usize,
    pub lb: f64,
    pub ub: f64,
}

impl Default for BinarySearch {
    fn default() -> Self {
        Self {
            iters: 64,
            lb: SIGMA_LB,
            ub: SIGMA_UB,
        }
    }
}

impl SigmaSearch for BinarySearch {
    fn tag(&self) -> &'static str {
        "bs"
    }

    fn bounds(&self) -> (f64, f64) {
        (self.lb, self.ub)
    }

    fn solve(&self, row: &PerplexityRow, target: f64, _seed: u64) -> RowSolution {
        let (mut lo, mut hi) = (self.lb, self.ub);
        for _ in 0..self.iters {
            let mid = 0.5 * (lo + hi);
            if row.perplexity(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma = 0.5 * (lo + hi);
        RowSolution {
            sigma,
            error: (row.perplexity(sigma) - target).abs(),
            evals: self.iters as u64 + 1,
        }
    }
}

pub fn binary_search_sigma(
    d2_row: &[f64],
    i: usize,
    target: f64,
    iters: usize,
    math: KernelConfig,
) -> Result<RowSolution> {
    let row = PerplexityRow::new(d2_row, i, math)?;
    Ok(BinarySearch {
        iters,
        ..BinarySearch::default()
    }
    .solve(&row, target, 0))
}

/// Simulated annealing over `ln sigma`.
///
/// Temperature and proposal width both decay geometrically, from `t0` to
/// `t_end` and from `step0` to `step_end`, over `steps` proposals. A fraction
/// `jump_prob` of proposals is drawn uniformly over the whole domain instead,
/// which lets the walk leave the flat tails of the objective. Worse states
/// are accepted with probability `exp(-dE / T)`; the best state ever visited
/// is returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annealing {
    pub t0: f64,
    pub t_end: f64,
    pub step0: f64,
    pub step_end: f64,
    pub jump_prob: f64,
    pub steps: usize,
    pub lb: f64,
    pub ub: f64,
}

impl Default for Annealing {
    fn default() -> Self {
        Self {
            t0: 1.0,
            t_end: 1e-12,
            step0: 4.0,
            step_end: 1e-9,
            jump_prob: 0.2,
            steps: 2000,
            lb: SIGMA_LB,
            ub: SIGMA_UB,
        }
    }
}

impl Annealing {
    pub fn minimize<F: FnMut(f64) -> f64>(
        &self,
        mut objective: F,
        target: f64,
        seed: u64,
    ) -> RowSolution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ulo, uhi) = (self.lb.ln(), self.ub.ln());
        let mut eval = |u: f64| (objective(u.exp().clamp(self.lb, self.ub)) - target).abs();
        let mut u = 0.0f64.clamp(ulo, uhi);
        let mut energy = eval(u);
        let (mut best_u, mut best_e) = (u, energy);
        let span = self.steps.saturating_sub(1).max(1) as f64;
        let t_decay = (self.t_end / self.t0).powf(1.0 / span);
        let s_decay = (self.step_end / self.step0).powf(1.0 / span);
        let (mut t, mut width) = (self.t0, self.step0);
        for _ in 0..self.steps {
            let cand = if rng.random::<f64>() < self.jump_prob {
                rng.random_range(ulo..=uhi)
            } else {
                let step: f64 = rng.sample(StandardNormal);
                (u + width * step).clamp(ulo, uhi)
            };
            let e = eval(cand);
            let accept = e <= energy || rng.random::<f64>() < (-(e - energy) / t).exp();
            if accept {
                u = cand;
                energy = e;
                if e < best_e {
                    best_u = cand;
                    best_e = e;
                }
            }
            t *= t_decay;
            width *= s_decay;
        }
        RowSolution {
            sigma: best_u.exp().clamp(self.lb, self.ub),
            error: best_e,
            evals: self.steps as u64 + 1,
        }
    }
}

impl SigmaSearch for Annealing {
    fn tag(&self) -> &'static str {
        "sa"
    }

    fn bounds(&self) -> (f64, f64) {
        (self.lb, self.ub)
    }

    fn solve(&self, row: &PerplexityRow, target: f64, seed: u64) -> RowSolution {
        self.minimize(|s| row.perplexity(s), target, seed)
    }
}

pub fn anneal_sigma(
    d2_row: &[f64],
    i: usize,
    target: f64,
    seed: u64,
    math: KernelConfig,
) -> Result<RowSolution> {
    let row = PerplexityRow::new(d2_row, i, math)?;
    Ok(Annealing::default().solve(&row, target, seed))
}

/// Optimizer selector used by configuration and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Bs,
    De,
    Sa,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Bs, OptimizerKind::De, OptimizerKind::Sa];
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Bs => "bs",
            OptimizerKind::De => "de",
            OptimizerKind::Sa => "sa",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bs" => Ok(Self::Bs),
            "de" => Ok(Self::De),
            "sa" => Ok(Self::Sa),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected de, bs or sa)"
            ))),
        }
    }
}

/// A concrete search strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    BinarySearch(BinarySearch),
    DifferentialEvolution(DifferentialEvolution),
    Annealing(Annealing),
}

impl Optimizer {
    pub fn with_defaults(kind: OptimizerKind, de: DEConfig) -> Self {
        match kind {
            OptimizerKind::Bs => Optimizer::BinarySearch(BinarySearch::default()),
            OptimizerKind::De => Optimizer::DifferentialEvolution(DifferentialEvolution::new(de)),
            OptimizerKind::Sa => Optimizer::Annealing(Annealing::default()),
        }
    }

    fn inner(&self) -> &dyn SigmaSearch {
        match self {
            Optimizer::BinarySearch(s) => s,
            Optimizer::DifferentialEvolution(s) => s,
            Optimizer::Annealing(s) => s,
        }
    }
}

impl SigmaSearch for Optimizer {
    fn tag(&self) -> &'static str {
        self.inner().tag()
    }

    fn bounds(&self) -> (f64, f64) {
        self.inner().bounds()
    }

    fn solve(&self, row: &PerplexityRow, target: f64, seed: u64) -> RowSolution {
        self.inner().solve(row, target, seed)
    }
}

/// Calibrated bandwidths for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaVector {
    pub sigma: Vec<f64>,
    pub per_row_error: Vec<f64>,
    pub evals: Vec<u64>,
    pub optimizer_tag: String,
}

impl SigmaVector {
    pub fn mean_error(&self) -> f64 {
        self.per_row_error.iter().sum::<f64>() / self.per_row_error.len() as f64
    }
}

/// Calibrate each row independently. Row `i` uses seed `seed ^ i`, so the
/// result does not depend on scheduling or thread count.
pub fn solve_sigmas(
    d2: &DistanceMatrix,
    target: f64,
    search: &dyn SigmaSearch,
    seed: u64,
    math: KernelConfig,
) -> Result<SigmaVector> {
    let n = d2.n();
    if !(target > 1.0 && target <= (n - 1) as f64) {
        return Err(Error::Config(format!(
            "perplexity target {target} must lie in (1, N-1] = (1, {}]",
            n - 1
        )));
    }
    let rows: Vec<RowSolution> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = PerplexityRow::new(d2.row(i), i, math)?;
            Ok(search.solve(&row, target, seed ^ i as u64))
        })
        .collect::<Result<_>>()?;
    Ok(SigmaVector {
        sigma: rows.iter().map(|r| r.sigma).collect(),
        per_row_error: rows.iter().map(|r| r.error).collect(),
        evals: rows.iter().map(|r| r.evals).collect(),
        optimizer_tag: search.tag().to_string(),
    })
}

/// Row-major `N x N` matrix of `p_{j|i}` for the given bandwidths.
pub fn conditional_matrix(
    d2: &DistanceMatrix,
    sigma: &[f64],
    math: KernelConfig,
) -> Result<Vec<f64>> {
    let n = d2.n();
    if sigma.len() != n {
        return Err(Error::Dimension(format!(
            "{} sigmas for N={n}",
            sigma.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| conditional_row(d2.row(i), i, sigma[i], math))
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

/// Symmetric joint probabilities `p_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    p: Vec<f64>,
    n: usize,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    /// Build directly from a dense matrix, checking the invariants.
    pub fn from_dense(p: Vec<f64>, n: usize) -> Result<Self> {
        if p.len() != n * n {
            return Err(Error::Dimension(format!("{} entries for N={n}", p.len())));
        }
        let m = Self { p, n };
        m.check()?;
        Ok(m)
    }

    /// Zero diagonal, exact symmetry, non-negative, total mass 1 within 1e-9.
    pub fn check(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if self.get(i, i) != 0.0 {
                return Err(Error::Invariant(format!("p[{i}][{i}] != 0")));
            }
            for j in 0..i {
                let v = self.get(i, j);
                if v != self.get(j, i) || !(v >= 0.0) {
                    return Err(Error::Invariant(format!(
                        "p[{i}][{j}] asymmetric or negative"
                    )));
                }
            }
        }
        let total = self.total();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("affinities sum to {total}")));
        }
        Ok(())
    }
}

/// `p_ij = (p_{j|i} + p_{i|j}) / 2N`, floored at [`PROBABILITY_FLOOR`] and
/// renormalized to unit mass.
pub fn joint_affinities(conditional: &[f64], n: usize) -> Result<AffinityMatrix> {
    if conditional.len() != n * n {
        return Err(Error::Dimension(format!(
            "conditional matrix has {} entries, expected {n}x{n}",
            conditional.len()
        )));
    }
    for i in 0..n {
        let sum: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| conditional[i * n + j])
            .sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Data(format!(
                "conditional row {i} sums to {sum}, expected 1"
            )));
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let v =
                ((conditional[i * n + j] + conditional[j * n + i]) * scale).max(PROBABILITY_FLOOR);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    let total: f64 = p.iter().sum();
    let inv = 1.0 / total;
    p.iter_mut().for_each(|v| *v *= inv);
    let m = AffinityMatrix { p, n };
    m.check()?;
    Ok(m)
}

/// Distances to joint affinities: calibrate sigmas, then symmetrize.
pub fn affinities(
    d2: &DistanceMatrix,
    target: f64,
    search: &dyn SigmaSearch,
    seed: u64,
    math: KernelConfig,
) -> Result<(SigmaVector, AffinityMatrix)> {
    let sigmas = solve_sigmas(d2, target, search, seed, math)?;
    let cond = conditional_matrix(d2, &sigmas.sigma, math)?;
    let p = joint_affinities(&cond, d2.n())?;
    Ok((sigmas, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMatrix;
    use crate::distance::pairwise_sq_dist;
    use proptest::prelude::*;
    use rand::Rng;

    const REF: KernelConfig = KernelConfig {
        cordic_iterations: 24,
        newton_iterations: 5,
        backend: crate::kernels::Backend::Reference,
    };

    fn random_row(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        row[0] = 0.0;
        row
    }

    #[test]
    fn equidistant_neighbors_split_evenly() {
        let p = conditional_row(&[0.0, 2.0, 2.0], 0, 1.3, REF).unwrap();
        assert_eq!(p, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn far_neighbor_gets_no_mass() {
        let p = conditional_row(&[0.0, 1.0, 1e9], 0, 1.0, REF).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 1.0).abs() < 1e-12 && p[2] < 1e-12);
    }

    #[test]
    fn matches_direct_formula() {
        let row = random_row(40, 5);
        let sigma: f64 = 0.7;
        let p = conditional_row(&row, 0, sigma, REF).unwrap();
        let w: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, d)| {
                if j == 0 {
                    0.0
                } else {
                    (-d / (2.0 * sigma * sigma)).exp()
                }
            })
            .collect();
        let z: f64 = w.iter().sum();
        for (a, b) in p.iter().zip(&w) {
            assert!((a - b / z).abs() <= 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn conditional_row_rejects_bad_input() {
        assert!(conditional_row(&[0.0, f64::NAN], 0, 1.0, REF).is_err());
        assert!(conditional_row(&[0.0, f64::INFINITY, f64::INFINITY], 0, 1.0, REF).is_err());
        assert!(conditional_row(&[0.0, 1.0], 0, 0.0, REF).is_err());
    }

    #[test]
    fn perplexity_of_simple_rows() {
        assert!((row_perplexity(&[0.0, 0.5, 0.5], REF) - 2.0).abs() < 1e-12);
        let k = 7;
        let uniform = vec![1.0 / k as f64; k];
        assert!((row_perplexity(&uniform, REF) - k as f64).abs() < 1e-12);
        assert_eq!(row_perplexity(&[0.0, 1.0, 0.0], REF), 1.0);
    }

    #[test]
    fn de_identity_objective() {
        let out = de_optimize(|x| x, 15.0, &DEConfig::default());
        assert!((out.best - 15.0).abs() <= 1e-10, "{out:?}");
        assert!(out.best_error <= 1e-10);
    }

    #[test]
    fn de_is_seed_deterministic() {
        let cfg = DEConfig {
            seed: 99,
            ..DEConfig::default()
        };
        let a = de_optimize(|x| x.sin() * 20.0, 3.0, &cfg);
        let b = de_optimize(|x| x.sin() * 20.0, 3.0, &cfg);
        assert_eq!(a, b);
        let c = de_optimize(|x| x.sin() * 20.0, 3.0, &DEConfig { seed: 100, ..cfg });
        assert_ne!(a, c);
    }

    #[test]
    fn de_calibrates_a_row() {
        let row = random_row(64, 11);
        let r = PerplexityRow::new(&row, 0, REF).unwrap();
        let out = DifferentialEvolution::default().solve(&r, 15.0, 3);
        let p = conditional_row(&row, 0, out.sigma, REF).unwrap();
        assert!((row_perplexity(&p, REF) - 15.0).abs() <= 1e-6);
    }

    #[test]
    fn closed_form_matches_entropy_route() {
        for seed in 0..5 {
            let row = random_row(50, seed);
            let r = PerplexityRow::new(&row, 0, REF).unwrap();
            for &sigma in &[0.05, 0.3, 1.0, 7.0] {
                let direct = row_perplexity(&r.probabilities(sigma), REF);
                assert!((r.perplexity(sigma) - direct).abs() <= 1e-12 * direct);
            }
        }
    }

    #[test]
    fn linear_space_de_collapses_on_small_sigma() {
        // sigma* ~ 0.1 here; uniform init over [1e-20, 1000] misses it
        let row: Vec<f64> = random_row(128, 21).iter().map(|d| d * 0.01).collect();
        let r = PerplexityRow::new(&row, 0, REF).unwrap();
        let linear = DifferentialEvolution {
            config: DEConfig::default(),
            space: SearchSpace::Linear,
        };
        let log = DifferentialEvolution::new(DEConfig::default());
        let bad = linear.solve(&r, 15.0, 1);
        let good = log.solve(&r, 15.0, 1);
        assert!(bad.error > 1.0, "{bad:?}");
        assert!(good.error <= 1e-10, "{good:?}");
    }

    #[test]
    fn de_config_validation() {
        let ok = DEConfig::default();
        assert!(ok.validate().is_ok());
        assert!(DEConfig { cr: 0.0, ..ok }.validate().is_err());
        assert!(DEConfig {
            f_weight: 2.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(DEConfig {
            lb: 5.0,
            ub: 1.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(DEConfig { pop_size: 3, ..ok }.validate().is_err());
    }

    #[test]
    fn bisection_converges_in_monotone_regime() {
        let row = random_row(64, 12);
        let s = binary_search_sigma(&row, 0, 15.0, 64, REF).unwrap();
        let p = conditional_row(&row, 0, s.sigma, REF).unwrap();
        assert!((row_perplexity(&p, REF) - 15.0).abs() <= 1e-6);
        assert_eq!(s, binary_search_sigma(&row, 0, 15.0, 64, REF).unwrap());
    }

    #[test]
    fn bisection_unreachable_target() {
        let row = random_row(10, 13);
        let s = binary_search_sigma(&row, 0, 20.0, 64, REF).unwrap();
        assert!((s.sigma - SIGMA_UB).abs() < 1e-9);
        // at sigma = 1000 the row is essentially uniform over 9 neighbors
        assert!((s.error - 11.0).abs() < 1e-3, "{s:?}");
    }

    #[test]
    fn annealing_identity_objective() {
        let a = Annealing::default();
        let s = a.minimize(|x| x, 15.0, 4);
        assert!(s.error <= 1e-3, "{s:?}");
        assert_eq!(s, a.minimize(|x| x, 15.0, 4));
    }

    #[test]
    fn three_points_reach_uniform_limit() {
        let m = DatasetMatrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]], "t").unwrap();
        let d2 = pairwise_sq_dist(&m).unwrap();
        for kind in OptimizerKind::ALL {
            let opt = Optimizer::with_defaults(kind, DEConfig::default());
            let s = solve_sigmas(&d2, 2.0, &opt, 1, REF).unwrap();
            for i in 0..3 {
                let p = conditional_row(d2.row(i), i, s.sigma[i], REF).unwrap();
                assert!(
                    (row_perplexity(&p, REF) - 2.0).abs() < 1e-3,
                    "{kind}: {s:?}"
                );
            }
        }
    }

    #[test]
    fn duplicate_rows_report_constant_perplexity() {
        let m =
            DatasetMatrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]], "t").unwrap();
        let d2 = pairwise_sq_dist(&m).unwrap();
        let s = solve_sigmas(
            &d2,
            2.0,
            &Optimizer::with_defaults(OptimizerKind::Bs, DEConfig::default()),
            0,
            REF,
        )
        .unwrap();
        assert!(s.per_row_error.iter().all(|e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn solve_rejects_bad_target() {
        let m = DatasetMatrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]], "t").unwrap();
        let d2 = pairwise_sq_dist(&m).unwrap();
        let opt = Optimizer::with_defaults(OptimizerKind::Bs, DEConfig::default());
        assert!(matches!(
            solve_sigmas(&d2, 1.0, &opt, 0, REF),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            solve_sigmas(&d2, 2.5, &opt, 0, REF),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn joint_two_points() {
        let p = joint_affinities(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn joint_symmetric_input() {
        // symmetric conditionals: p_ij = p_{j|i} / N
        let c = [
            0.0, 0.5, 0.5, //
            0.5, 0.0, 0.5, //
            0.5, 0.5, 0.0,
        ];
        let p = joint_affinities(&c, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = c[i * 3 + j] / 3.0;
                assert!((p.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn joint_rejects_bad_rows() {
        assert!(matches!(
            joint_affinities(&[0.0, 0.9, 1.0, 0.0], 2),
            Err(Error::Data(_))
        ));
    }

    fn random_conditionals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                if i != j {
                    let v: f64 = rng.random_range(0.0..1.0);
                    c[i * n + j] = v * v * v;
                    s += c[i * n + j];
                }
            }
            for j in 0..n {
                c[i * n + j] /= s;
            }
        }
        c
    }

    #[test]
    fn joint_random_mass() {
        let n = 30;
        let p = joint_affinities(&random_conditionals(n, 8), n).unwrap();
        // independent Kahan-style summation as the oracle
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &v in p.as_slice() {
            let y = v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn perplexity_bounded(seed in any::<u64>(), n in 3usize..40, sigma in 0.05f64..10.0) {
            let row = random_row(n, seed);
            let p = conditional_row(&row, 0, sigma, REF).unwrap();
            let nonzero = p.iter().filter(|&&v| v > 0.0).count() as f64;
            let perp = row_perplexity(&p, REF);
            prop_assert!(perp >= 1.0 - 1e-12 && perp <= nonzero * (1.0 + 1e-12));
        }

        #[test]
        fn shift_invariance(seed in any::<u64>(), c in 0.0f64..50.0, sigma in 0.1f64..5.0) {
            let row = random_row(25, seed);
            let shifted: Vec<f64> = row.iter().map(|d| d + c).collect();
            let a = conditional_row(&row, 0, sigma, REF).unwrap();
            let b = conditional_row(&shifted, 0, sigma, REF).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn de_stays_in_bounds(seed in any::<u64>(), target in -100.0f64..2000.0) {
            let cfg = DEConfig { seed, max_iter: 50, lb: 1.0, ub: 10.0, ..DEConfig::default() };
            let out = de_optimize(|x| x * x, target, &cfg);
            prop_assert!(out.best >= 1.0 && out.best <= 10.0);
        }

        #[test]
        fn joint_invariants(n in 2usize..20, seed in any::<u64>()) {
            let p = joint_affinities(&random_conditionals(n, seed), n).unwrap();
            prop_assert!(p.check().is_ok());
            prop_assert!(p.as_slice().iter().enumerate().all(|(k, &v)| k % (n + 1) == 0 || v >= PROBABILITY_FLOOR * 0.5));
        }
    }
}
