use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use moex::ops::{conv2d_backward, conv2d_forward};
use moex::{exchange_batch, ExchangeMode, NormKind, NormScheme, Shape4};
use moex_bench::{normal_tensor, permutation};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for ch in [16, 32, 64] {
        let side = 32 * 16 / ch;
        let x = normal_tensor(Shape4::new(8, ch, side, side), 1);
        let w = normal_tensor(Shape4::new(ch, ch, 3, 3), 2);
        let dy = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| conv2d_forward(black_box(&x), black_box(&w), None, 1, 1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward", ch), &ch, |b, _| {
            b.iter(|| conv2d_backward(black_box(&x), black_box(&w), black_box(&dy), 1, 1, true).unwrap())
        });
    }
    group.finish();
}

fn exchange(c: &mut Criterion) {
    let h = normal_tensor(Shape4::new(64, 16, 32, 32), 3);
    let perm = permutation(64, 4);
    let mut group = c.benchmark_group("exchange");
    for kind in [NormKind::Pono, NormKind::Instance, NormKind::Layer, NormKind::Group(4)] {
        let scheme = NormScheme::new(kind);
        group.bench_function(kind.to_string(), |b| {
            b.iter(|| exchange_batch(black_box(&h), &perm, &scheme, ExchangeMode::Both).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, exchange);
criterion_main!(benches);
