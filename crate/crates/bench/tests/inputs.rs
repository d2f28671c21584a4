//! Sanity checks on the inputs the benchmarks are built from, so a broken
//! fixture shows up in `cargo test` rather than as a panic mid-bench.

use ncae_core::data::build_contaminated_trainset;
use ncae_core::{LabeledDataset, ModelConfig, NcaeModel, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pixels = (0..n * 784).map(|_| rng.gen::<f32>()).collect();
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    LabeledDataset::new([1, 28, 28], pixels, labels).unwrap()
}

#[test]
fn train_fixture_is_one_short_batch() {
    let t = build_contaminated_trainset(&dataset(160), 0, 0.2, 0).unwrap();
    assert_eq!(t.len(), 20);
    assert_eq!(t.hidden_truth.iter().filter(|&&h| h == 1).count(), 4);
    assert!(t.len() < TrainConfig::default().batch_size);
}

#[test]
fn default_model_builds_for_mnist_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = NcaeModel::<f32>::new(ModelConfig::default(), 0.1, &mut rng).unwrap();
    assert!(m.latent_dim() > 0);
}
