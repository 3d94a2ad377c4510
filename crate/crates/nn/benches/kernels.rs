//! Parallel vs sequential kernel timings. The sequential numbers come from
//! the same binary via the runtime toggle, so both paths see identical
//! inputs and produce identical outputs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use facegan_nn::kernels::{conv2d_backward_weight, conv2d_forward, conv_transpose2d_forward};
use facegan_nn::parallel::set_sequential;
use facegan_nn::tensor::Tensor;

fn ramp(dims: &[usize], scale: f64) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|i| ((i as f64) * 0.37).sin() * scale).collect())
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward_64x64_16to32");
    let x = ramp(&[16, 64, 64], 1.0);
    let w = ramp(&[32, 16, 4, 4], 0.1);
    for par in [true, false] {
        let name = if par { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            set_sequential(!par);
            b.iter(|| black_box(conv2d_forward(black_box(&x), black_box(&w), None, 2, 1)));
            set_sequential(false);
        });
    }
    group.finish();
}

fn bench_conv_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_backward_weight_64x64_16to32");
    let x = ramp(&[16, 64, 64], 1.0);
    let g = ramp(&[32, 32, 32], 1.0);
    for par in [true, false] {
        let name = if par { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            set_sequential(!par);
            b.iter(|| black_box(conv2d_backward_weight(black_box(&g), black_box(&x), (4, 4), 2, 1)));
            set_sequential(false);
        });
    }
    group.finish();
}

fn bench_conv_transpose(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_transpose2d_32to64_32ch");
    let x = ramp(&[32, 32, 32], 1.0);
    let w = ramp(&[32, 16, 4, 4], 0.1);
    for par in [true, false] {
        let name = if par { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            set_sequential(!par);
            b.iter(|| {
                black_box(conv_transpose2d_forward(
                    black_box(&x),
                    black_box(&w),
                    None,
                    2,
                    1,
                ))
            });
            set_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_conv_backward, bench_conv_transpose);
criterion_main!(benches);
