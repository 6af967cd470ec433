use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mbsl_core::datagen::generate;
use mbsl_core::grouping::{embed_and_group, tsne_2d, TsneParams};
use mbsl_core::objective::{cross_modal_loss, EmbeddingBatch, Negatives};
use mbsl_core::rng::rng_from;
use mbsl_core::tensor::conv1d_causal;
use mbsl_core::trainer::{contrastive_batch_loss, init_bank};
use mbsl_core::{GeneratorConfig, GroupingConfig, ModelConfig, Tape, Tensor, TrainConfig};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = random(&[32, 128], 1);
    let w = random(&[32, 32, 3], 2);
    let b = random(&[32], 3);
    c.bench_function("conv1d_causal 32x128 k3 d4", |bench| {
        bench.iter(|| conv1d_causal(black_box(&x), &w, &b, 4).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let ds = generate(&GeneratorConfig {
        n_windows: 64,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let spec = ModelConfig::default().encoder_spec(ds.fs).unwrap();
    let bank = init_bank(&ds, &[vec![0, 1], vec![2]], spec, 0).unwrap();
    let cfg = TrainConfig::default();
    let batch: Vec<usize> = (0..cfg.batch_size).collect();
    c.bench_function("encoder forward+backward batch 32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let bound = bank.bind(&mut tape);
            let loss = contrastive_batch_loss(&bank, &mut tape, &bound, &ds, &batch, &cfg, 0).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss).data()[0])
        })
    });
}

fn loss(c: &mut Criterion) {
    let batch = EmbeddingBatch::new((0..3).map(|g| random(&[32, 64], 10 + g)).collect()).unwrap();
    c.bench_function("cross_modal_loss K=3 N=32 D=64", |bench| {
        bench.iter(|| cross_modal_loss(black_box(&batch), 0.1, Negatives::CrossView).unwrap())
    });
}

fn tsne(c: &mut Criterion) {
    let points: Vec<Vec<f64>> = (0..120).map(|i| random(&[16], 100 + i).data().to_vec()).collect();
    let params = TsneParams {
        iterations: 300,
        ..TsneParams::default()
    };
    c.bench_function("tsne_2d 120 points 300 iters", |bench| {
        bench.iter(|| tsne_2d(black_box(&points), &params, 0))
    });
}

fn grouping(c: &mut Criterion) {
    let ds = generate(&GeneratorConfig::default()).unwrap();
    let cfg = GroupingConfig::default();
    let mut group = c.benchmark_group("grouping");
    group.sample_size(10);
    group.bench_function("embed_and_group default dataset", |bench| {
        bench.iter(|| embed_and_group(&ds, &cfg, cfg.variant, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, train_step, loss, tsne, grouping);
criterion_main!(benches);
