use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use point2vec::backbone::ForwardCtx;
use point2vec::numerics::{Array, Tensor};
use point2vec::pretraining::PretrainConfig;
use point2vec::{ModelConfig, PointEncoder, Pretrainer};
use point2vec_bench::patch_batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: [usize; 2]| {
        Tensor::<f32>::constant(Array::from_fn(shape, |_| rng.random_range(-1.0..1.0)))
    };
    let (a, b) = (rand([2048, 384]), rand([384, 1536]));
    c.bench_function("matmul 2048x384x1536", |bench| {
        bench.iter(|| black_box(&a).matmul(&b))
    });
}

fn desk_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.encoder.depth = 4;
    m.encoder.dim = 32;
    m.encoder.heads = 4;
    m.pointnet.first = [32, 32];
    m.pointnet.second = [64, 32];
    m.pos_hidden = 32;
    m
}

fn encoder(c: &mut Criterion) {
    let sets = patch_batch(8, 1024, 64, 32);
    let mut group = c.benchmark_group("encoder forward, 8 clouds");
    group.sample_size(10);
    let small = PointEncoder::<f32>::new(desk_model(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    group.bench_function("depth 4 width 32", |b| {
        b.iter(|| small.forward(black_box(&sets), &mut ForwardCtx::eval()))
    });
    let full = PointEncoder::<f32>::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    group.bench_function("depth 12 width 384", |b| {
        b.iter(|| full.forward(black_box(&sets), &mut ForwardCtx::eval()))
    });
    group.finish();
}

fn pretrain_step(c: &mut Criterion) {
    let sets = patch_batch(32, 256, 16, 16);
    let config = PretrainConfig {
        batch_size: Some(32),
        epochs: 1000,
        warmup_epochs: 10,
        target_layers: 2,
        decoder_depth: Some(2),
        points: 256,
        centers: 16,
        group_size: 16,
        ..PretrainConfig::default()
    };
    let mut trainer = Pretrainer::<f32>::new(desk_model(), config, 32, 0).unwrap();
    let mut group = c.benchmark_group("pretrain step");
    group.sample_size(10);
    group.bench_function("desk model, batch 32", |b| {
        b.iter(|| trainer.step_on(black_box(&sets)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, matmul, encoder, pretrain_step);
criterion_main!(benches);
