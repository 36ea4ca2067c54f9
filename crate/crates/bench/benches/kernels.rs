use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evclplus::bayes_mlp::Noise;
use evclplus::numerics::{gemm, SeededRng};
use evclplus::objectives::{estimate_fisher_diag, Batch};
use evclplus_bench::{mnist_batch, mnist_net, random_matrix};

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    let mut rng = SeededRng::new(0);
    for n in [32, 128, 256] {
        let a = random_matrix(n, n, &mut rng);
        let b = random_matrix(n, n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| gemm(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_forward_backward(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let net = mnist_net(&mut rng);
    let (inputs, _) = mnist_batch(256, &mut rng);
    let dlogits = random_matrix(256, 10, &mut rng);

    c.bench_function("forward_256", |b| {
        b.iter(|| net.forward(black_box(&inputs), 0, Noise::Sample(&mut rng)).unwrap())
    });
    c.bench_function("forward_backward_256", |b| {
        b.iter(|| {
            let cache = net.forward(&inputs, 0, Noise::Sample(&mut rng)).unwrap();
            net.backward(&cache, black_box(&dlogits)).unwrap()
        })
    });
}

fn bench_fisher(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let net = mnist_net(&mut rng);
    let (inputs, labels) = mnist_batch(200, &mut rng);
    let batch = Batch::new(&inputs, &labels).unwrap();

    let mut group = c.benchmark_group("fisher_diag");
    group.sample_size(10);
    group.bench_function("200_samples", |b| {
        b.iter(|| estimate_fisher_diag(&net, batch, 0, 200, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_forward_backward, bench_fisher);
criterion_main!(benches);
