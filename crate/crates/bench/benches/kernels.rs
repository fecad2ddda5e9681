use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mkis_bench::{random_tensor, scored_pixels};
use mkis_core::eval::roc_auc;
use mkis_core::tensor::kernels::{conv2d, conv2d_input_grad, conv2d_weight_grad, conv_transpose2d};
use mkis_core::{Model, ModelConfig};

fn convolutions(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_24ch_64x64");
    let x = random_tensor::<f32>(&[1, 24, 64, 64], 1);
    for k in [3usize, 5, 11] {
        let w = random_tensor::<f32>(&[24, 24, k, k], 2);
        group.throughput(Throughput::Elements((k * k * 24 * 24 * 64 * 64) as u64));
        group.bench_with_input(BenchmarkId::new("forward", k), &k, |b, &k| {
            b.iter(|| conv2d(black_box(&x), &w, 1, (k - 1) / 2, None).unwrap())
        });
        let g = random_tensor::<f32>(&[1, 24, 64, 64], 3);
        group.bench_with_input(BenchmarkId::new("input_grad", k), &k, |b, &k| {
            b.iter(|| conv2d_input_grad(black_box(&g), &w, (64, 64), 1, (k - 1) / 2, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("weight_grad", k), &k, |b, &k| {
            b.iter(|| conv2d_weight_grad(black_box(&x), &g, (k, k), 1, (k - 1) / 2).unwrap())
        });
    }
    group.finish();

    let x = random_tensor::<f32>(&[1, 24, 32, 32], 4);
    let w = random_tensor::<f32>(&[24, 24, 4, 4], 5);
    c.bench_function("conv_transpose2d_24ch_32_to_64", |b| {
        b.iter(|| conv_transpose2d(black_box(&x), &w, 2, 1, None).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let model = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("predict_default");
    group.sample_size(10);
    for side in [64usize, 128] {
        let x = random_tensor::<f32>(&[1, 3, side, side], 6);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| model.predict(black_box(&x)).unwrap())
        });
    }
    group.finish();
}

fn auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("roc_auc");
    for n in [584 * 565, 1 << 20] {
        let (scores, gt) = scored_pixels(n, 7);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| roc_auc(black_box(&scores), &gt, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convolutions, forward, auc);
criterion_main!(benches);
