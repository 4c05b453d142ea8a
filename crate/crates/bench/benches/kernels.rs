use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vortex_bench::{example, model};
use vortex_core::augment::apply_motion;
use vortex_core::model::{model_backward, model_forward, Cotangent};
use vortex_core::mri::make_poisson_disc_mask;
use vortex_core::rng::keyed;
use vortex_core::{fft2c, ifft2c};

fn fft(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft2c");
    for n in [32, 64, 128] {
        let (image, _) = example(n, 1, 0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &image, |b, x| {
            b.iter(|| ifft2c(&fft2c(black_box(x)).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn sense(c: &mut Criterion) {
    let (image, ex) = example(32, 4, 0);
    c.bench_function("sense_forward_32x32x4", |b| b.iter(|| ex.op.forward(black_box(&image)).unwrap()));
    c.bench_function("sense_adjoint_32x32x4", |b| b.iter(|| ex.op.adjoint(black_box(&ex.kspace)).unwrap()));
}

fn mask(c: &mut Criterion) {
    c.bench_function("poisson_disc_mask_32x32_r8", |b| {
        b.iter(|| make_poisson_disc_mask(32, 32, 8.0, (8, 8), black_box(7)).unwrap())
    });
}

fn motion(c: &mut Criterion) {
    let (_, ex) = example(32, 4, 0);
    c.bench_function("apply_motion_32x32x4", |b| {
        b.iter(|| apply_motion(black_box(&ex.kspace), 0.4, &mut keyed(&[3])).unwrap())
    });
}

fn unet(c: &mut Criterion) {
    let (_, ex) = example(32, 4, 0);
    let x = ex.zero_filled().unwrap();
    let params = model(2, 8);
    c.bench_function("unet_forward_d2_b8_32x32", |b| b.iter(|| model_forward(&params, black_box(&x)).unwrap()));
    let (out, trace) = model_forward(&params, &x).unwrap();
    let cot = Cotangent::output(out);
    c.bench_function("unet_backward_d2_b8_32x32", |b| {
        b.iter(|| model_backward(&params, black_box(&trace), &cot).unwrap())
    });
}

criterion_group!(benches, fft, sense, mask, motion, unet);
criterion_main!(benches);
