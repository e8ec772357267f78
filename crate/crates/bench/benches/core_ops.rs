//! Benchmarks for the hot paths: forward, backward, composition algebra,
//! and one full distillation batch step.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use mpt_bench::fixture;
use mpt_core::numerics::{matmul, Matrix, Rng};
use mpt_core::objectives::{batch_objective, DistillConfig};
use mpt_core::prompts::{chain_gradients, compose, VanillaPrompt};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let mut a = Matrix::zeros(24, 16);
    let mut b = Matrix::zeros(16, 16);
    for v in a.data_mut() {
        *v = rng.gauss(1.0);
    }
    for v in b.data_mut() {
        *v = rng.gauss(1.0);
    }
    c.bench_function("matmul 24x16 * 16x16", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_compose_and_chain(c: &mut Criterion) {
    let f = fixture();
    c.bench_function("compose l=8 d=16", |bench| {
        bench.iter(|| compose(black_box(&f.shared), black_box(&f.factors)).unwrap())
    });
    let upstream = Matrix::filled(8, 16, 0.01);
    c.bench_function("chain_gradients l=8 d=16", |bench| {
        bench.iter(|| {
            chain_gradients(black_box(&upstream), black_box(&f.shared), black_box(&f.factors))
                .unwrap()
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let f = fixture();
    let composed = compose(&f.shared, &f.factors).unwrap();
    c.bench_function("forward prompt8+src6 tgt6", |bench| {
        bench.iter(|| {
            mpt_core::forward(
                black_box(&f.model),
                black_box(&composed),
                black_box(&f.src),
                black_box(&f.tgt),
            )
            .unwrap()
        })
    });
    c.bench_function("greedy_decode src6", |bench| {
        bench.iter(|| {
            mpt_core::greedy_decode(black_box(&f.model), black_box(&composed), black_box(&f.src))
                .unwrap()
        })
    });
}

fn bench_backward(c: &mut Criterion) {
    let f = fixture();
    let composed = compose(&f.shared, &f.factors).unwrap();
    let trace = mpt_core::forward(&f.model, &composed, &f.src, &f.tgt).unwrap();
    let (_, dlogits) = mpt_core::task_loss_with_grad(&trace, &f.tgt).unwrap();
    let dh_enc = Matrix::zeros(trace.enc_hidden.rows(), trace.enc_hidden.cols());
    let dh_dec = Matrix::zeros(trace.dec_hidden.rows(), trace.dec_hidden.cols());
    c.bench_function("backward_to_prompt", |bench| {
        bench.iter_batched(
            || trace.clone(),
            |t| {
                mpt_core::backward_to_prompt(
                    black_box(&f.model),
                    black_box(&t),
                    black_box(&dlogits),
                    black_box(&dh_enc),
                    black_box(&dh_dec),
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_batch_objective(c: &mut Criterion) {
    let f = fixture();
    let teacher = VanillaPrompt {
        matrix: f.teacher.clone(),
    };
    let examples: Vec<(Vec<usize>, Vec<usize>)> =
        (0..16).map(|_| (f.src.clone(), f.tgt.clone())).collect();
    let cfg = DistillConfig::standard(0.9, 2.0);
    c.bench_function("batch_objective distil batch16", |bench| {
        bench.iter(|| {
            batch_objective(
                black_box(&f.model),
                black_box(&f.shared),
                black_box(&f.factors),
                Some(black_box(&teacher)),
                black_box(&examples),
                black_box(&cfg),
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_compose_and_chain,
    bench_forward,
    bench_backward,
    bench_batch_objective
);
criterion_main!(benches);
