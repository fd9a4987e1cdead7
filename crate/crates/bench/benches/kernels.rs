use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use qnoise_bench::{gauss_batch, gmm_batch, gmm_state, uniforms};
use qnoise_core::processes::kac_velocity;
use qnoise_core::quantile::{ProductQuantile, RqsConfig};
use qnoise_core::transport::{cost_matrix, solve_assignment};
use std::hint::black_box;

fn kac(c: &mut Criterion) {
    let pts: Vec<(f64, f64)> = (0..1000)
        .map(|i| {
            let t = 0.01 + 0.99 * (i % 100) as f64 / 99.0;
            (t, 3.0 * t * ((i / 100) as f64 / 9.0 * 2.0 - 1.0))
        })
        .collect();
    c.bench_function("kac velocity x1000", |b| {
        b.iter(|| pts.iter().map(|&(t, x)| kac_velocity(9.0, 3.0, t, x).unwrap()).sum::<f64>())
    });
}

fn assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("assignment");
    for n in [64, 128, 256] {
        let cost = cost_matrix(gmm_batch(n, 1).view(), gauss_batch(n, 2).view()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| solve_assignment(black_box(cost.view())).unwrap())
        });
    }
    group.finish();
}

fn rqs(c: &mut Criterion) {
    let u = uniforms(128, 3);
    for (name, cfg) in [("rqs eval b128 affine", RqsConfig::default()), ("rqs eval b128 logit", RqsConfig::heavy_tailed())] {
        let q = ProductQuantile::new(2, cfg).unwrap();
        c.bench_function(name, |b| b.iter(|| q.eval_batch(black_box(&u)).unwrap()));
    }
    let q = ProductQuantile::new(2, RqsConfig::default()).unwrap();
    let ones = ndarray::Array2::ones((128, 2));
    c.bench_function("rqs backward b128", |b| b.iter(|| q.backward_batch(&u, &ones, &ones).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train step b128");
    group.sample_size(20);
    for (name, hidden) in [("3x64", vec![64; 3]), ("4x256", vec![256; 4])] {
        let x = gmm_batch(128, 4);
        group.bench_function(name, |b| {
            b.iter_batched(|| gmm_state(hidden.clone()), |mut st| st.train_step(&x).unwrap(), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, kac, assignment, rqs, train_step);
criterion_main!(benches);
