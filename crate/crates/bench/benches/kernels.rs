use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dart_core::graph::{matmul_nn, Graph};
use dart_core::rng;
use dart_core::schedule::{cosine_markov, markov_to_gamma, y_process_build};
use dart_core::tensor::Tensor;

fn bench_matmul(c: &mut Criterion) {
    let mut r = rng::substream(&[1]);
    let a: Vec<f32> = rng::normal_vec(&mut r, 128 * 64);
    let b: Vec<f32> = rng::normal_vec(&mut r, 64 * 64);
    c.bench_function("matmul_128x64x64_f32", |bench| {
        bench.iter(|| {
            let mut out = vec![0.0f32; 128 * 64];
            matmul_nn(black_box(&a), black_box(&b), 128, 64, 64, &mut out);
            out
        })
    });
}

fn bench_schedule(c: &mut Criterion) {
    c.bench_function("cosine_bijection_t16", |bench| {
        bench.iter(|| {
            let m = cosine_markov(black_box(16)).unwrap();
            let g = markov_to_gamma(&m).unwrap();
            y_process_build(&g).unwrap()
        })
    });
}

fn bench_graph_backward(c: &mut Criterion) {
    let mut r = rng::substream(&[2]);
    let x = Tensor::new(vec![64, 48], rng::normal_vec::<f32>(&mut r, 64 * 48)).unwrap();
    let w = Tensor::new(vec![48, 48], rng::normal_vec::<f32>(&mut r, 48 * 48)).unwrap();
    c.bench_function("graph_matmul_silu_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let wn = g.param(w.clone());
            let y = g.matmul(xn, wn).unwrap();
            let s = g.silu(y);
            let loss = g.mean_all(s);
            g.backward(loss).unwrap()
        })
    });
}

criterion_group!(benches, bench_matmul, bench_schedule, bench_graph_backward);
criterion_main!(benches);
