// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric kernels at the sizes the desk model actually uses.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scalewise_bench::{features, tokens};
use scalewise_core::model::scaled_dot_product;
use scalewise_core::numerics::{area_pool, bilinear_upsample, matmul, softmax_rows};
use scalewise_core::quantizer::quantize;

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for side in [8usize, 16, 32] {
        let n = side * side;
        let (q, k, v) = (tokens(1, n, 16), tokens(2, n, 16), tokens(3, n, 16));
        group.bench_with_input(BenchmarkId::new("head", n), &n, |b, _| {
            b.iter(|| scaled_dot_product(black_box(&q), black_box(&k), black_box(&v)).unwrap())
        });
    }
    group.finish();
}

fn dense(c: &mut Criterion) {
    let x = tokens(4, 1024, 64);
    let w = tokens(5, 64, 256);
    c.bench_function("matmul_1024x64x256", |b| b.iter(|| matmul(black_box(&x), black_box(&w)).unwrap()));
    let scores = tokens(6, 256, 256);
    c.bench_function("softmax_256x256", |b| b.iter(|| softmax_rows(black_box(&scores))));
}

fn resampling(c: &mut Criterion) {
    let small = features(7, 16, 8);
    let full = features(8, 16, 32);
    c.bench_function("upsample_8_to_32", |b| b.iter(|| bilinear_upsample(black_box(&small), 32, 32).unwrap()));
    c.bench_function("pool_32_to_6", |b| b.iter(|| area_pool(black_box(&full), 6, 6).unwrap()));
    c.bench_function("quantize_32x32", |b| b.iter(|| quantize(black_box(&full), 16).unwrap()));
}

criterion_group!(benches, attention, dense, resampling);
criterion_main!(benches);
