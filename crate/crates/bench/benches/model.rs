use criterion::{criterion_group, criterion_main, Criterion};

use claw_unet::data::{synth_generate, SynthSpec};
use claw_unet::model::{forward, init_params};
use claw_unet::train::{TrainConfig, Trainer};
use claw_unet::{Mode, ModelConfig};

fn forward_desk(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let params = init_params::<f32>(&cfg).unwrap();
    let set = synth_generate(&SynthSpec::default(), 1).unwrap();
    let image = set[0].with_channels(cfg.input_channels).unwrap().image;
    let mut g = c.benchmark_group("desk");
    g.sample_size(10);
    g.bench_function("forward eval 1x128x128", |b| b.iter(|| forward(&image, &params, Mode::Eval).unwrap()));
    let batch: Vec<_> = set.iter().map(|s| s.with_channels(cfg.input_channels).unwrap()).collect();
    let refs: Vec<_> = batch.iter().collect();
    let mut trainer = Trainer::new(params.clone(), &TrainConfig::default());
    g.bench_function("train step batch 1", |b| b.iter(|| trainer.step(&refs).unwrap()));
    g.finish();
}

criterion_group!(benches, forward_desk);
criterion_main!(benches);
