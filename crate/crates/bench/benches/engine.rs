use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use feedcap::model::assemble_noise_covariance;
use feedcap::oracle::{cp_objective, CoverPombraStrategy};
use feedcap::{
    evaluate_rate, optimize_strategy, run_noise_filter, ChannelConfig, OptimizerOptions,
};
use feedcap_bench::{arma, strategy, two_driver};

fn filters(c: &mut Criterion) {
    let mut group = c.benchmark_group("filters");
    for n in [16, 128, 1024] {
        let r = arma(n);
        group.bench_with_input(BenchmarkId::new("noise_filter", n), &r, |b, r| {
            b.iter(|| run_noise_filter(r).unwrap())
        });
        let s = strategy(n);
        group.bench_with_input(BenchmarkId::new("evaluate_rate", n), &r, |b, r| {
            b.iter(|| evaluate_rate(r, &s).unwrap())
        });
    }
    group.finish();
}

fn optimizer(c: &mut Criterion) {
    let mut group = c.benchmark_group("optimize");
    group.sample_size(10);
    let opts = OptimizerOptions {
        restarts: 4,
        ..OptimizerOptions::default()
    };
    for n in [4, 8] {
        let r = two_driver(n);
        let cfg = ChannelConfig::new(1.0, n).unwrap();
        group.bench_with_input(BenchmarkId::new("sequential", n), &r, |b, r| {
            b.iter(|| optimize_strategy(r, &cfg, &opts).unwrap())
        });
    }
    group.finish();
}

fn matrix_form(c: &mut Criterion) {
    let mut group = c.benchmark_group("matrix_form");
    for n in [4, 8] {
        let k_v = assemble_noise_covariance(&arma(n)).unwrap();
        let mut s = CoverPombraStrategy::zero(n);
        s.dither_cov.fill_diagonal(0.5);
        group.bench_with_input(BenchmarkId::new("objective", n), &k_v, |b, k_v| {
            b.iter(|| cp_objective(k_v, &s).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, filters, optimizer, matrix_form);
criterion_main!(benches);
