use std::hint::black_box;

use cfm::extract::{default_delta, extract_factors, LowRankFit, RankRule};
use cfm::matdecomp::soft_threshold_singular;
use cfm::prox_apg::solve;
use cfm::simulate::Dgp;
use cfm_bench::{low_rank_plus_noise, simulated, solver_at};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn prox(c: &mut Criterion) {
    let mut group = c.benchmark_group("soft_threshold");
    for (rows, cols) in [(150, 50), (50, 50), (500, 100)] {
        let a = low_rank_plus_noise(rows, cols, 3, 0.05);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &a, |b, a| {
            b.iter(|| soft_threshold_singular(black_box(a), 0.5).unwrap())
        });
    }
    group.finish();
}

fn estimate(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    for which in [Dgp::Dgp1, Dgp::Dgp2, Dgp::Dgp3] {
        let truth = simulated(which, 50, 50);
        let config = solver_at(&truth, which, 0.3);
        group.bench_function(which.name(), |b| {
            b.iter(|| solve(black_box(&truth.panel), which.default_family(), &config).unwrap())
        });
    }
    group.finish();
}

fn extract(c: &mut Criterion) {
    let mut group = c.benchmark_group("extract");
    for which in [Dgp::Dgp1, Dgp::Dgp2, Dgp::Dgp3] {
        let truth = simulated(which, 50, 50);
        let family = which.default_family();
        let fit = LowRankFit::estimate(&truth.panel, family, &solver_at(&truth, which, 0.3)).unwrap();
        let delta = default_delta(&truth.panel, family).unwrap();
        group.bench_function(which.name(), |b| {
            b.iter(|| extract_factors(black_box(&fit), RankRule::Threshold(delta)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, prox, estimate, extract);
criterion_main!(benches);
