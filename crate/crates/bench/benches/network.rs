use criterion::{criterion_group, criterion_main, Criterion};
use hyperconv::blocks::{block_forward, BlockWeights};
use hyperconv::nn::Mode;
use hyperconv::{BlockConfig, BlockVariant, Model, NetworkConfig};
use hyperconv_bench::{activations, rng};
use std::hint::black_box;

fn blocks(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_forward");
    for variant in BlockVariant::ALL {
        // Tensor blocks cap their width, so they run at 16 channels.
        let width = if variant.is_tensor() { 16 } else { 32 };
        let u = activations(8, width, 16);
        let mut cfg = BlockConfig::new(variant, width);
        if variant.is_tensor() {
            cfg.expansion = 2;
        }
        let w = BlockWeights::init(&cfg, 4, &mut rng(5)).unwrap();
        group.bench_function(format!("{variant}_{width}ch"), |b| b.iter(|| block_forward(black_box(&u), &cfg, &w).unwrap()));
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut cfg = NetworkConfig::desk(BlockVariant::Eq3);
    cfg.image_size = 16;
    let x = activations(16, cfg.in_channels, 16);
    let y: Vec<usize> = (0..16).map(|i| i % cfg.num_classes).collect();
    let model = Model::new(cfg, 0).unwrap();
    c.bench_function("desk_eq3_loss_and_grads", |b| {
        b.iter(|| model.clone().loss_and_grads(black_box(&x), &y, Mode::Train).unwrap())
    });
}

criterion_group!(benches, blocks, training_step);
criterion_main!(benches);
