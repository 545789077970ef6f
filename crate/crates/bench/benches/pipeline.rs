use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use decomo_core::config::RunConfig;
use decomo_core::pipeline::init_model;
use decomo_core::synthdata::generate_clips;
use decomo_core::trainer::{TrainConfig, TrainData, Trainer};

fn train_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let d = &cfg.data;
    let clips: Vec<_> = generate_clips(64, d.frames, d.height, d.width, 1).unwrap().into_iter().map(|x| x.1).collect();
    let model = init_model(&cfg).unwrap();
    let data = TrainData::prepare(&model, &clips).unwrap();
    let tc = TrainConfig { steps: 1_000_000, ..cfg.train.clone() };
    let mut tr = Trainer::new(model, tc, &cfg.hash()).unwrap();
    let mut g = c.benchmark_group("trainer");
    g.sample_size(10);
    g.bench_function("fine_tune_step_desk_fixture", |b| b.iter(|| black_box(tr.train_step(&data).unwrap())));
    g.finish();
}

fn sample(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = init_model(&cfg).unwrap();
    let prompts = vec!["a small red circle slides fast toward the left on the black background".to_string(); 4];
    let mut g = c.benchmark_group("sampling");
    g.sample_size(10);
    g.bench_function("ddim_10_steps_batch_4", |b| {
        b.iter(|| black_box(model.sample(&prompts, true, &cfg.eval.ddim, 0).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, train_step, sample);
criterion_main!(benches);
