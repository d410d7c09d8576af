use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::hint::black_box;

use xai_ran_core::explain::{explain_shap, BaselineSpec, ExplainConfig, Method};
use xai_ran_core::fidelity::{temporal_fidelity, NeighborhoodConfig};
use xai_ran_core::model::{ModelParams, Normalizer, Predictor};
use xai_ran_core::stats::{paired_delta, BootstrapConfig};
use xai_ran_core::trace::{generate_trace, BurstConfig, DEFAULT_WINDOW, N_FEATURES};
use xai_ran_core::ExecMode;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn predictor() -> Predictor {
    Predictor::new(ModelParams::init(N_FEATURES, 16, 7), Normalizer::identity(N_FEATURES)).unwrap()
}

fn bench_fidelity(c: &mut Criterion) {
    let trace = generate_trace(&BurstConfig {
        length: 300,
        ..BurstConfig::default()
    })
    .unwrap();
    let p = predictor();
    let explain = ExplainConfig::new(Method::Hybrid);
    let cfg = NeighborhoodConfig::default();
    let mut group = c.benchmark_group("temporal_fidelity");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| {
                temporal_fidelity(&trace, DEFAULT_WINDOW, &p, &explain, 1, &cfg, false, mode).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_shap(c: &mut Criterion) {
    let p = predictor();
    let x = ndarray::Array2::from_shape_fn((DEFAULT_WINDOW, N_FEATURES), |(t, i)| {
        ((t * N_FEATURES + i) as f64 * 0.37).sin()
    });
    let mut group = c.benchmark_group("explain_shap_m256");
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| explain_shap(&p, black_box(&x), &BaselineSpec::NormalizedZero, 256, 42, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_bootstrap(c: &mut Criterion) {
    let normal = Normal::new(0.4, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..2000).map(|_| normal.sample(&mut rng)).collect();
    let b = vec![0.0; a.len()];
    let cfg = BootstrapConfig::default();
    let mut group = c.benchmark_group("paired_delta_n2000");
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |bch, &mode| {
            bch.iter(|| paired_delta(black_box(&a), &b, &cfg, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_fidelity, bench_shap, bench_bootstrap);
criterion_main!(benches);
