use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use msical_bench::{gyro_model, gyro_signal};
use msical_core::estimators::{gmwm_fit, FitOptions, ObjectiveSpec, WeightScheme};
use msical_core::wv::default_scales;
use msical_core::{estimate_wv, theoretical_wv, StreamKey, WvOptions};

fn bench_estimate_wv(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimate_wv");
    for &n in &[10_000usize, 100_000] {
        let x = gyro_signal(n);
        let j = default_scales(n);
        group.bench_with_input(BenchmarkId::new("chi2", n), &x, |b, x| {
            b.iter(|| estimate_wv(black_box(x), j, &WvOptions::default()).unwrap())
        });
    }
    let x = gyro_signal(10_000);
    group.bench_function("mbb100/10000", |b| {
        let opts = WvOptions::with_bootstrap(100, StreamKey::new(2));
        b.iter(|| estimate_wv(black_box(&x), 12, &opts).unwrap())
    });
    group.finish();
}

fn bench_theoretical_wv(c: &mut Criterion) {
    let m = gyro_model();
    c.bench_function("theoretical_wv/j13", |b| {
        b.iter(|| theoretical_wv(black_box(&m), 13).unwrap())
    });
}

fn bench_gmwm_fit(c: &mut Criterion) {
    let n = 100_000;
    let j = default_scales(n);
    let wv = estimate_wv(&gyro_signal(n), j, &WvOptions::default()).unwrap();
    let spec = ObjectiveSpec::identity(j, WeightScheme::uniform_d(&[n]).unwrap());
    let opts = FitOptions {
        compute_covariance: false,
        ..FitOptions::default()
    };
    let m = gyro_model();
    let mut group = c.benchmark_group("gmwm_fit");
    group.sample_size(10);
    group.bench_function("wn_ar1_rw", |b| {
        b.iter(|| gmwm_fit(black_box(&wv), &m, &spec, &opts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_estimate_wv, bench_theoretical_wv, bench_gmwm_fit);
criterion_main!(benches);
