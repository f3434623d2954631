use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use voxlang::cas::{gaussian_smooth, sample_topk};
use voxlang::interaction::cosine_logits;
use voxlang::metrics::squared_distance_transform;
use voxlang::nn::{Conv3d, Padding};
use voxlang_bench::{rng, uniform2, uniform3, uniform4};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    g.sample_size(10);
    for &(ch, side) in &[(16usize, 16usize), (32, 16), (16, 32)] {
        let mut layer = Conv3d::<f32>::new("bench", ch, ch, 3, 1, Padding::Zero, true, &mut rng(0));
        let x = uniform4([ch, side, side, side], 1);
        let dy = uniform4([ch, side, side, side], 2);
        let id = format!("{ch}ch-{side}^3");
        g.bench_function(BenchmarkId::new("forward", &id), |b| b.iter(|| layer.forward(black_box(&x))));
        g.bench_function(BenchmarkId::new("backward", &id), |b| {
            b.iter(|| layer.backward(black_box(&x), black_box(&dy), true))
        });
    }
    g.finish();
}

fn similarity(c: &mut Criterion) {
    let mut g = c.benchmark_group("cosine_logits");
    let text = uniform2(5, 32, 3);
    for &rows in &[3277usize, 32768] {
        let tokens = uniform2(rows, 32, 4);
        g.bench_function(BenchmarkId::from_parameter(rows), |b| {
            b.iter(|| cosine_logits(black_box(tokens.view()), text.view(), 0.07, None))
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let heat = uniform3([32, 32, 32], 5);
    c.bench_function("sample_topk 32^3 k=3277", |b| b.iter(|| sample_topk(black_box(heat.view()), 3277)));
    let dense = heat.mapv(f64::from);
    c.bench_function("gaussian_smooth 32^3 sigma=2", |b| b.iter(|| gaussian_smooth(black_box(&dense), 2.0)));
}

fn distance(c: &mut Criterion) {
    let mask = uniform3([32, 32, 32], 6).mapv(|v| v > 0.6);
    c.bench_function("distance_transform 32^3", |b| {
        b.iter(|| squared_distance_transform(black_box(&mask), [1.5, 1.5, 1.5]))
    });
}

criterion_group!(benches, conv, similarity, sampling, distance);
criterion_main!(benches);
