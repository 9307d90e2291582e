use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deocc_bench::{face, networks};
use deocc_core::deocc_gan::deocclude;
use deocc_core::metrics::ssim;
use deocc_core::rasterizer::{render, ShadingParams};
use deocc_core::{fit, FitConfig};

fn bench_render(c: &mut Criterion) {
    let f = face(128);
    c.bench_function("render_128", |b| {
        b.iter(|| render(&f.model, black_box(&f.coefficients), &f.pose, 128, 128, &ShadingParams::default()).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    let f = face(128);
    let cfg = FitConfig::default();
    c.bench_function("fit_68_landmarks", |b| b.iter(|| fit(&f.model, black_box(&f.landmarks), &cfg, None).unwrap()));
}

fn bench_generator(c: &mut Criterion) {
    let f = face(64);
    let net = networks(64);
    c.bench_function("generator_forward_64", |b| b.iter(|| deocclude(&net, black_box(&f.image), &f.image).unwrap()));
}

fn bench_ssim(c: &mut Criterion) {
    let a = face(128).image;
    let b2 = face(128).image;
    c.bench_function("ssim_128", |b| b.iter(|| ssim(black_box(&a), &b2).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_render, bench_fit, bench_generator, bench_ssim
}
criterion_main!(benches);
