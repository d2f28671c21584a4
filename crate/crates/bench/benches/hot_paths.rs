use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ncae_core::data::build_contaminated_trainset;
use ncae_core::mining::{build_dictionary, contamination_scores};
use ncae_core::{
    roc_auc, ImageBatch, LabeledDataset, LatentCenter, ModelConfig, NcaeModel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PIXELS: usize = 28 * 28;

fn images(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n * PIXELS).map(|_| rng.gen::<f32>()).collect()
}

fn model(rng: &mut ChaCha8Rng) -> NcaeModel<f32> {
    NcaeModel::new(ModelConfig::default(), 0.1, rng).unwrap()
}

fn encoder_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(&mut rng);
    let batch = ImageBatch::new([128, 1, 28, 28], images(128, &mut rng)).unwrap();
    c.bench_function("encode 128 images", |b| {
        b.iter(|| m.encode(black_box(&batch)).unwrap())
    });
    c.bench_function("reconstruct 128 images", |b| {
        b.iter(|| m.reconstruct(black_box(&batch)).unwrap())
    });
}

fn auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let scores: Vec<f64> = (0..n)
        .map(|_| (rng.gen::<f64>() * 1000.0).round())
        .collect();
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 10 != 5)).collect();
    c.bench_function("roc_auc 10k with ties", |b| {
        b.iter(|| roc_auc(black_box(&scores), black_box(&labels)).unwrap())
    });
}

fn mining(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = model(&mut rng);
    let batch = ImageBatch::new([128, 1, 28, 28], images(128, &mut rng)).unwrap();
    let z = m.encode(&batch).unwrap();
    let center = LatentCenter::from_latents(&z, 0.01).unwrap();
    c.bench_function("build dictionary m=128", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(4),
            |mut r| build_dictionary(&m, &center, 128, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let dict = build_dictionary(&m, &center, 128, &mut rng).unwrap();
    c.bench_function("contamination scores 128x128", |b| {
        b.iter(|| contamination_scores(black_box(&z), black_box(&dict)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 160;
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let ds = LabeledDataset::new([1, 28, 28], images(n, &mut rng), labels).unwrap();
    // 16 normals plus 4 injected anomalies: one short batch per epoch.
    let t = build_contaminated_trainset(&ds, 0, 0.2, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("one NCAE step, 20 samples", |b| {
        b.iter(|| ncae_core::train(&cfg, black_box(&t)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, encoder_forward, auc, mining, train_step);
criterion_main!(benches);
