use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use halo_bench::{dense, linear_fixture, tanh_map, SEED};
use halo_core::controller::run_halo;
use halo_core::dynamics::{jacobian_fd, simulate_open_loop, spectral_norm, NoiseModel, NoiseStream, StateVector};
use halo_core::error_prop::{propagate_covariance, trace_bound, CovarianceState, GrowthBoundParams};
use halo_core::horizon::{critical_horizon, HorizonParams};
use halo_core::observer::{mean_attention_entropy, synth_attention, FrameShape, ObserverCalibration};

fn linear_algebra(c: &mut Criterion) {
    let mut g = c.benchmark_group("linear_algebra");
    for d in [8usize, 32, 128] {
        let a = dense(d);
        g.bench_with_input(BenchmarkId::new("spectral_norm", d), &a, |b, a| {
            b.iter(|| spectral_norm(black_box(a), 1000, 1e-10))
        });
        let cov = CovarianceState::new(DMatrix::identity(d, d)).unwrap();
        g.bench_with_input(BenchmarkId::new("propagate_covariance", d), &a, |b, a| {
            b.iter(|| propagate_covariance(black_box(&cov), a, 0.01).unwrap())
        });
        let map = tanh_map(d);
        let s = StateVector::filled(d, 0.2);
        g.bench_with_input(BenchmarkId::new("jacobian_fd", d), &d, |b, _| {
            b.iter(|| jacobian_fd(&map, black_box(&s), 0, 1e-6).unwrap())
        });
    }
    g.finish();
}

fn closed_forms(c: &mut Criterion) {
    let p = GrowthBoundParams::new(1.1, 0.01, 1.0, 10.0).unwrap();
    c.bench_function("trace_bound", |b| b.iter(|| trace_bound(black_box(200), &p)));
    let h = HorizonParams::new(0.1, 0.16, 16.0).unwrap();
    c.bench_function("critical_horizon", |b| b.iter(|| critical_horizon(black_box(&h))));
}

fn observer(c: &mut Criterion) {
    let shape = FrameShape { layers: 4, heads: 4, context_len: 64 };
    let cal = ObserverCalibration::reference();
    let mut noise = NoiseStream::new(1.0, SEED);
    c.bench_function("synth_attention_4x4x64", |b| {
        b.iter(|| synth_attention(black_box(0.1), &cal, 0.1, &mut noise, &shape).unwrap())
    });
    let frame = synth_attention(0.1, &cal, 0.1, &mut noise, &shape).unwrap();
    c.bench_function("mean_attention_entropy_4x4x64", |b| {
        b.iter(|| mean_attention_entropy(black_box(&frame)).unwrap())
    });
}

fn runs(c: &mut Criterion) {
    let mut g = c.benchmark_group("runs");
    for d in [16usize, 64] {
        let f = linear_fixture(d, 0.1);
        g.bench_with_input(BenchmarkId::new("open_loop", d), &f, |b, f| {
            b.iter(|| simulate_open_loop(&f.map, &f.s0, &NoiseModel::new(0.01, SEED).unwrap(), f.horizon).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("run_halo", d), &f, |b, f| {
            b.iter(|| run_halo(&f.map, &f.s0, &f.noise, &f.cal, &f.cfg, &f.spec, &f.observer, f.horizon).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, linear_algebra, closed_forms, observer, runs);
criterion_main!(benches);
