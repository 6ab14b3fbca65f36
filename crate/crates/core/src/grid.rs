//! Uniform grid over a 2-D embedding and proportional per-cell sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{target_count, CoresetSelection};
use crate::embedding::Embedding;
use crate::error::{Error, Result};

pub const DEFAULT_CELLS_PER_AXIS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells_per_axis: usize,
    /// `(min, max)` per axis, `max > min`.
    pub bounds: [(f64, f64); 2],
}

impl GridSpec {
    /// Tight bounds around `y`; a degenerate axis is widened by 0.5 each way.
    pub fn fit(y: &Embedding, cells_per_axis: usize) -> Result<Self> {
        check_2d(y)?;
        if cells_per_axis == 0 {
            return Err(Error::Config(
                "grid needs at least one cell per axis".into(),
            ));
        }
        let mut bounds = [(f64::INFINITY, f64::NEG_INFINITY); 2];
        for p in y.y.chunks_exact(2) {
            for (b, &v) in bounds.iter_mut().zip(p) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        for b in &mut bounds {
            if b.1 <= b.0 {
                *b = (b.0 - 0.5, b.1 + 0.5);
            }
        }
        Ok(Self {
            cells_per_axis,
            bounds,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells_per_axis * self.cells_per_axis
    }

    fn axis_index(&self, axis: usize, v: f64) -> usize {
        let (lo, hi) = self.bounds[axis];
        let g = self.cells_per_axis;
        let t = ((v - lo) / (hi - lo) * g as f64).floor();
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(g - 1)
        }
    }

    /// `ix + iy * cells_per_axis`.
    pub fn cell_id(&self, p: [f64; 2]) -> usize {
        self.axis_index(0, p[0]) + self.axis_index(1, p[1]) * self.cells_per_axis
    }
}

fn check_2d(y: &Embedding) -> Result<()> {
    if y.d != 2 {
        return Err(Error::Dimension(format!(
            "grid sampling needs a 2-D embedding, got d={}",
            y.d
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellAssignment {
    pub cell_of: Vec<usize>,
    /// Non-empty cells only; members ordered by `(y0, y1, index)`.
    pub occupancy: BTreeMap<usize, Vec<usize>>,
    pub cells_per_axis: usize,
}

impl CellAssignment {
    pub fn n(&self) -> usize {
        self.cell_of.len()
    }
}

pub fn grid_partition(y: &Embedding, spec: &GridSpec) -> Result<CellAssignment> {
    check_2d(y)?;
    let cell_of: Vec<usize> =
        y.y.chunks_exact(2)
            .map(|p| spec.cell_id([p[0], p[1]]))
            .collect();
    let mut occupancy: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cell_of.iter().enumerate() {
        occupancy.entry(c).or_default().push(i);
    }
    // coordinate order makes per-cell draws independent of input order
    for members in occupancy.values_mut() {
        members.sort_by(|&a, &b| {
            let (pa, pb) = (y.point(a), y.point(b));
            pa[0]
                .total_cmp(&pb[0])
                .then(pa[1].total_cmp(&pb[1]))
                .then(a.cmp(&b))
        });
    }
    Ok(CellAssignment {
        cell_of,
        occupancy,
        cells_per_axis: spec.cells_per_axis,
    })
}

/// Split `target` over groups proportionally to `sizes` by largest remainder.
///
/// Shares are `target * size / total` in exact integer arithmetic; leftover
/// units go to the largest fractional parts, ties to the earlier group.
pub fn largest_remainder(sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quota: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(sizes.len());
    for (k, &s) in sizes.iter().enumerate() {
        let num = target as u128 * s as u128;
        quota.push((num / total as u128) as usize);
        rems.push((num % total as u128, k));
    }
    let assigned: usize = quota.iter().sum();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in rems.iter().take(target.saturating_sub(assigned)) {
        quota[k] += 1;
    }
    quota
}

/// Quotas summing to `round(keeping_ratio * N)`, proportional to occupancy.
pub fn allocate_quotas(
    assign: &CellAssignment,
    keeping_ratio: f64,
) -> Result<BTreeMap<usize, usize>> {
    if !(keeping_ratio > 0.0 && keeping_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "keeping ratio {keeping_ratio} outside (0, 1]"
        )));
    }
    let target = target_count(keeping_ratio, assign.n());
    allocate_quotas_for_target(assign, target)
}

/// Quotas summing to an explicit `target <= N`.
pub fn allocate_quotas_for_target(
    assign: &CellAssignment,
    target: usize,
) -> Result<BTreeMap<usize, usize>> {
    if target == 0 {
        return Err(Error::Config(format!(
            "keeping ratio selects no samples out of N={}",
            assign.n()
        )));
    }
    if target > assign.n() {
        return Err(Error::Config(format!(
            "target {target} exceeds N={}",
            assign.n()
        )));
    }
    let sizes: Vec<usize> = assign.occupancy.values().map(Vec::len).collect();
    let quotas = largest_remainder(&sizes, target);
    Ok(assign.occupancy.keys().copied().zip(quotas).collect())
}

/// Per-cell stream seed; depends on the cell id only, never on point order.
pub fn cell_seed(seed: u64, cell: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        ^ (cell as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chosen `(index, cell)` pairs, in no particular order.
fn draw(
    assign: &CellAssignment,
    quotas: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let mut picked = Vec::with_capacity(quotas.values().sum());
    for (&cell, &q) in quotas {
        if q == 0 {
            continue;
        }
        let members = assign.occupancy.get(&cell).map_or(&[][..], Vec::as_slice);
        if q > members.len() {
            return Err(Error::Invariant(format!(
                "cell {cell} quota {q} exceeds occupancy {}",
                members.len()
            )));
        }
        let mut pool = members.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, cell));
        for k in 0..q {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
        }
        picked.extend(pool[..q].iter().map(|&i| (i, cell)));
    }
    Ok(picked)
}

/// Seeded partial Fisher-Yates in each cell; indices returned ascending.
pub fn sample_cells(
    assign: &CellAssignment,
    quotas: &BTreeMap<usize, usize>,
    keeping_ratio: f64,
    seed: u64,
) -> Result<CoresetSelection> {
    let mut picked = draw(assign, quotas, seed)?;
    picked.sort_unstable();
    if picked.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Invariant("index selected twice".into()));
    }
    let n = assign.n();
    Ok(CoresetSelection {
        indices: picked.iter().map(|p| p.0).collect(),
        cells: picked.iter().map(|p| p.1).collect(),
        labels: vec![-1; picked.len()],
        keeping_ratio,
        n,
        seed,
        source_id: String::new(),
        config: BTreeMap::new(),
        config_hash: String::new(),
    })
}

/// Partition, allocate and sample in one call.
pub fn select(
    y: &Embedding,
    cells_per_axis: usize,
    keeping_ratio: f64,
    seed: u64,
) -> Result<CoresetSelection> {
    let spec = GridSpec::fit(y, cells_per_axis)?;
    let assign = grid_partition(y, &spec)?;
    let quotas = allocate_quotas(&assign, keeping_ratio)?;
    sample_cells(&assign, &quotas, keeping_ratio, seed)
}

/// Number of non-empty cells that received at least one sample.
pub fn covered_cells(sel: &CoresetSelection) -> usize {
    let mut cells = sel.cells.clone();
    cells.sort_unstable();
    cells.dedup();
    cells.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn emb(points: &[[f64; 2]]) -> Embedding {
        Embedding::new(points.iter().flatten().copied().collect(), points.len(), 2).unwrap()
    }

    fn random_emb(n: usize, seed: u64) -> Embedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        emb(&pts)
    }

    /// Assignment with the given occupancies, cells numbered 0..
    fn synthetic(occ: &[usize]) -> CellAssignment {
        let mut cell_of = Vec::new();
        let mut occupancy = BTreeMap::new();
        for (c, &k) in occ.iter().enumerate() {
            let start = cell_of.len();
            cell_of.extend(std::iter::repeat_n(c, k));
            occupancy.insert(c, (start..start + k).collect());
        }
        CellAssignment {
            cell_of,
            occupancy,
            cells_per_axis: 4,
        }
    }

    #[test]
    fn corners_land_in_distinct_cells() {
        let y = emb(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let spec = GridSpec::fit(&y, 2).unwrap();
        let a = grid_partition(&y, &spec).unwrap();
        assert_eq!(a.cell_of, vec![0, 1, 2, 3]);
    }

    #[test]
    fn max_bound_clamps_to_last_cell() {
        let spec = GridSpec {
            cells_per_axis: 4,
            bounds: [(0.0, 1.0), (0.0, 1.0)],
        };
        assert_eq!(spec.cell_id([1.0, 1.0]), 15);
        assert_eq!(spec.cell_id([-3.0, 0.3]), 4);
    }

    #[test]
    fn degenerate_axis_expands() {
        let y = emb(&[[2.0, 1.0], [2.0, 3.0]]);
        let spec = GridSpec::fit(&y, 8).unwrap();
        assert_eq!(spec.bounds[0], (1.5, 2.5));
        assert_eq!(spec.bounds[1], (1.0, 3.0));
    }

    #[test]
    fn rejects_non_2d() {
        let y = Embedding::new(vec![0.0; 9], 3, 3).unwrap();
        let spec = GridSpec {
            cells_per_axis: 2,
            bounds: [(0.0, 1.0), (0.0, 1.0)],
        };
        assert!(matches!(
            grid_partition(&y, &spec),
            Err(Error::Dimension(_))
        ));
        assert!(GridSpec::fit(&y, 2).is_err());
    }

    #[test]
    fn occupancy_counts_all_points() {
        let y = random_emb(500, 1);
        let spec = GridSpec::fit(&y, 32).unwrap();
        let a = grid_partition(&y, &spec).unwrap();
        let total: usize = a.occupancy.values().map(Vec::len).sum();
        assert_eq!(total, 500);
        assert!(a.cell_of.iter().all(|&c| c < 1024));
    }

    #[test]
    fn quota_examples() {
        let q = allocate_quotas(&synthetic(&[100]), 0.1).unwrap();
        assert_eq!(q[&0], 10);
        let q = allocate_quotas(&synthetic(&[10; 10]), 0.1).unwrap();
        assert!(q.values().all(|&v| v == 1));
    }

    #[test]
    fn quota_largest_remainder_by_hand() {
        // T = 3; exact shares 1.4, 1.0, 0.6; floors [1, 1, 0] leave one unit,
        // which goes to the largest remainder (cell 2)
        let q = allocate_quotas(&synthetic(&[7, 5, 3]), 0.2).unwrap();
        assert_eq!(q.values().copied().collect::<Vec<_>>(), vec![1, 1, 1]);
    }

    #[test]
    fn quota_ties_go_to_lower_cell() {
        // T = 1 over two equal cells
        assert_eq!(largest_remainder(&[3, 3], 1), vec![1, 0]);
        assert_eq!(largest_remainder(&[2, 5, 5], 2), vec![0, 1, 1]);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(allocate_quotas(&synthetic(&[3]), 0.1).is_err());
        assert!(allocate_quotas(&synthetic(&[3]), 0.0).is_err());
        assert!(allocate_quotas(&synthetic(&[3]), 1.5).is_err());
    }

    #[test]
    fn full_quota_selects_everything() {
        let a = synthetic(&[4, 2, 5]);
        let q = allocate_quotas(&a, 1.0).unwrap();
        let s = sample_cells(&a, &q, 1.0, 9).unwrap();
        assert_eq!(s.indices, (0..11).collect::<Vec<_>>());
        s.validate().unwrap();
    }

    #[test]
    fn single_cell_is_deterministic() {
        let a = synthetic(&[20]);
        let q = BTreeMap::from([(0, 1)]);
        let first = sample_cells(&a, &q, 0.05, 42).unwrap();
        for _ in 0..3 {
            assert_eq!(sample_cells(&a, &q, 0.05, 42).unwrap(), first);
        }
    }

    #[test]
    fn overfull_quota_is_invariant_error() {
        let a = synthetic(&[2]);
        let q = BTreeMap::from([(0, 3)]);
        assert!(matches!(
            sample_cells(&a, &q, 1.0, 0),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn counting_and_coverage_on_random_layout() {
        let y = random_emb(1000, 2);
        let spec = GridSpec::fit(&y, 32).unwrap();
        let a = grid_partition(&y, &spec).unwrap();
        let q = allocate_quotas(&a, 0.1).unwrap();
        let s = sample_cells(&a, &q, 0.1, 3).unwrap();
        assert_eq!(s.indices.len(), 100);
        s.validate().unwrap();
        for (c, m) in &a.occupancy {
            if m.len() >= 10 {
                assert!(s.cells.contains(c));
            }
        }
    }

    proptest! {
        #[test]
        fn exact_count_and_valid(n in 2usize..400, kr_i in 1usize..=10, g in 1usize..40, seed in any::<u64>()) {
            let kr = kr_i as f64 / 10.0;
            let y = random_emb(n, seed);
            let t = target_count(kr, n);
            prop_assume!(t >= 1);
            let s = select(&y, g, kr, seed).unwrap();
            prop_assert_eq!(s.indices.len(), t);
            prop_assert!(s.validate().is_ok());
        }

        #[test]
        fn quotas_bounded_and_exact(occ in prop::collection::vec(0usize..30, 1..20), t_frac in 0.0f64..1.0) {
            let n: usize = occ.iter().sum();
            let t = (t_frac * n as f64) as usize;
            let q = largest_remainder(&occ, t);
            prop_assert_eq!(q.iter().sum::<usize>(), if n == 0 { 0 } else { t });
            for (a, b) in q.iter().zip(&occ) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn permutation_invariant(n in 2usize..200, seed in any::<u64>()) {
            let y = random_emb(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut perm: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            let py: Vec<f64> = perm.iter().flat_map(|&i| y.point(i).to_vec()).collect();
            let yp = Embedding::new(py, n, 2).unwrap();
            let coords = |e: &Embedding, s: &CoresetSelection| {
                let mut v: Vec<(u64, u64)> = s.indices.iter()
                    .map(|&i| (e.point(i)[0].to_bits(), e.point(i)[1].to_bits()))
                    .collect();
                v.sort_unstable();
                v
            };
            let a = select(&y, 8, 0.3, seed).unwrap();
            let b = select(&yp, 8, 0.3, seed).unwrap();
            prop_assert_eq!(coords(&y, &a), coords(&yp, &b));
        }
    }
}
