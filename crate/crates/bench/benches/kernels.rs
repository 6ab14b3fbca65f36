use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use desne::distance::{pairwise_sq_dist, pairwise_sq_dist_naive};
use desne::embedding::{kl_gradient, low_dim_affinities, run_tsne};
use desne::perplexity::{BinarySearch, DifferentialEvolution, PerplexityRow};
use desne::{DEConfig, KernelConfig, SigmaSearch, TsneConfig};
use desne_bench::{distances, joint, mixture};

fn distance(c: &mut Criterion) {
    let mut g = c.benchmark_group("pairwise_sq_dist");
    for n in [200, 500] {
        let m = mixture(n, 64, 1);
        g.bench_with_input(BenchmarkId::new("gram", n), &m, |b, m| {
            b.iter(|| pairwise_sq_dist(black_box(m)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("naive", n), &m, |b, m| {
            b.iter(|| pairwise_sq_dist_naive(black_box(m)))
        });
    }
    g.finish();
}

fn row_search(c: &mut Criterion) {
    let d2 = distances(500, 32, 2);
    let math = KernelConfig::reference();
    let row = PerplexityRow::new(d2.row(0), 0, math).unwrap();
    let mut g = c.benchmark_group("sigma_row");
    let de = DifferentialEvolution::new(DEConfig::default());
    let bs = BinarySearch::default();
    g.bench_function("de", |b| b.iter(|| de.solve(black_box(&row), 15.0, 3)));
    g.bench_function("bs", |b| b.iter(|| bs.solve(black_box(&row), 15.0, 3)));
    g.finish();
}

fn tsne_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("tsne");
    for n in [200, 500] {
        let p = joint(n, 32, 4);
        let cfg = TsneConfig {
            iterations: 1,
            ..TsneConfig::default()
        };
        g.bench_with_input(BenchmarkId::new("one_iteration", n), &p, |b, p| {
            b.iter(|| run_tsne(black_box(p), &cfg, KernelConfig::reference()).unwrap())
        });
        let (y, _) = run_tsne(&p, &cfg, KernelConfig::reference()).unwrap();
        g.bench_with_input(BenchmarkId::new("gradient", n), &p, |b, p| {
            b.iter(|| {
                let q = low_dim_affinities(&y, KernelConfig::reference()).unwrap();
                kl_gradient(black_box(p), &q, &y).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, distance, row_search, tsne_step);
criterion_main!(benches);
