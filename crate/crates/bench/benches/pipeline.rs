use criterion::{criterion_group, criterion_main, Criterion};

use dart_core::losses::{loss_dart, LossOpts};
use dart_core::model::{init_params, Condition, ModelConfig, ParamStore};
use dart_core::noising::corrupt;
use dart_core::rng;
use dart_core::sampler::{sample_dart, SamplerOpts};
use dart_core::schedule::{cosine_markov, markov_to_gamma, Weighting};
use dart_core::tensor::Tensor;

fn setup() -> (ModelConfig, dart_core::schedule::GammaSchedule, ParamStore<f32>) {
    let cfg = ModelConfig::point_model(2, 8, 48, 2);
    let schedule = markov_to_gamma(&cosine_markov(8).unwrap()).unwrap();
    let store = init_params(&cfg, 3).unwrap();
    (cfg, schedule, store)
}

fn bench_training_step(c: &mut Criterion) {
    let (cfg, schedule, store) = setup();
    let batch: Vec<_> = (0..16)
        .map(|i| {
            let mut r = rng::substream(&[i as u64]);
            let x0 = Tensor::new(vec![1, 2], rng::normal_vec::<f32>(&mut r, 2)).unwrap();
            corrupt(&x0, &schedule, 100 + i as u64)
        })
        .collect();
    let opts = LossOpts {
        weighting: Weighting::SnrPlusOne,
        want_grads: true,
        ..Default::default()
    };
    c.bench_function("loss_dart_t8_batch16", |bench| {
        bench.iter(|| loss_dart(&store, &cfg, &schedule, &batch, &[], &opts).unwrap())
    });
}

fn bench_sampling(c: &mut Criterion) {
    let (cfg, schedule, store) = setup();
    let opts = SamplerOpts {
        seed: 1,
        ..Default::default()
    };
    c.bench_function("sample_dart_t8", |bench| {
        bench.iter(|| sample_dart(&store, &cfg, &schedule, Condition::None, &opts, 1).unwrap())
    });
}

criterion_group!(benches, bench_training_step, bench_sampling);
criterion_main!(benches);
