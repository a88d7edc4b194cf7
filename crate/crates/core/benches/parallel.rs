use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gormpo_core::density::{DensityEstimator, Kde, KdeConfig};
use gormpo_core::theory::{run_suite, SuiteConfig};
use gormpo_core::{Exec, SeedStream};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

fn normal(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = SeedStream::new(seed).rng();
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn kde_scoring(c: &mut Criterion) {
    let mut kde = Kde::new(5, KdeConfig { bandwidth: 0.5, k_neighbors: 64 });
    kde.fit_points(&normal(5000, 5, 1)).unwrap();
    let queries = normal(2000, 5, 2);
    let mut group = c.benchmark_group("kde_log_prob");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| kde.log_prob_with(&queries, exec).unwrap()));
    }
    group.finish();
}

fn theory_suite(c: &mut Criterion) {
    let config = SuiteConfig {
        theorem1_instances: 40,
        theorem2_instances: 10,
        ..SuiteConfig::default()
    };
    let mut group = c.benchmark_group("theory_suite");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| run_suite(&config, 0, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, kde_scoring, theory_suite);
criterion_main!(benches);
