//! Sequential vs rayon execution of the sampling-heavy hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sml_core::analysis::sml_landscape_mc_general;
use sml_core::data::gen_heteroskedastic_toy;
use sml_core::estimators::{train_estimator, EstimatorKind, TrainConfig, Units};
use sml_core::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn predict_batch(c: &mut Criterion) {
    let ds = gen_heteroskedastic_toy(1000, 1).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let model = train_estimator(EstimatorKind::Sml, &ds, &idx, &cfg, 1).unwrap();
    let test = &idx[..200];
    let mut group = c.benchmark_group("predict_batch_T200");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.predict_batch(&ds, test, 200, 7, Units::Standardized, exec).unwrap())
        });
    }
    group.finish();
}

fn landscape_mc(c: &mut Criterion) {
    let mut group = c.benchmark_group("landscape_mc_1e6");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sml_landscape_mc_general(0.5, 0.5, 0.0, 1.0, 1_000_000, 3, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, predict_batch, landscape_mc);
criterion_main!(benches);
