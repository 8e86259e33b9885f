//! Sequential vs rayon execution of the data-parallel kernels. Build with
//! `--no-default-features` to see the parallel arm fall back to sequential.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dpr::backbone::{DprNetModel, ModelConfig};
use dpr::data::{make_regime_synthetic, RegimeSpec, Split};
use dpr::diagnostics::diagnose;
use dpr::par::Execution;
use dpr::train::{batch_gradients, evaluate, PreparedData};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (DprNetModel, PreparedData) {
    let spec = RegimeSpec {
        channels: 4,
        ..RegimeSpec::default()
    };
    let (frame, _) = make_regime_synthetic(0, 2048, &spec).unwrap();
    let data = PreparedData::new(&frame, [0.7, 0.1, 0.2], 96, 24).unwrap();
    let mut cfg = ModelConfig::new(96, 24, 4).with_d_model(64);
    cfg.dpr.as_mut().unwrap().patterns = 4;
    (DprNetModel::new(cfg, 0).unwrap(), data)
}

fn bench_gradients(c: &mut Criterion) {
    let (model, data) = setup();
    let origins: Vec<usize> = (0..32).map(|i| i * 37).collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(batch_gradients(&model, &data, &origins, 8, Some((0, 0, 0)), exec).unwrap()));
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (model, data) = setup();
    let mut group = c.benchmark_group("evaluate_val");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&model, &data, Split::Val, exec).unwrap()));
        });
    }
    group.finish();
}

fn bench_diagnose(c: &mut Criterion) {
    let spec = RegimeSpec {
        channels: 16,
        ..RegimeSpec::default()
    };
    let (frame, _) = make_regime_synthetic(1, 4096, &spec).unwrap();
    let mut group = c.benchmark_group("diagnose_16ch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(diagnose("synthetic", &frame, exec)));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gradients, bench_evaluate, bench_diagnose);
criterion_main!(benches);
