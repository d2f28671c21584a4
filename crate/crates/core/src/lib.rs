//! Normality-calibrated autoencoder (NCAE) for anomaly detection when the
//! training set is contaminated with unlabeled anomalies.
//!
//! An encoder/decoder pair is trained jointly with two discriminators: one
//! pulls the latent distribution toward a Gaussian around a running center,
//! the other makes samples decoded from near that center look real. Each
//! batch is scored against a dictionary of those generated normals, the
//! top-scoring fraction is treated as contaminated, and their reconstruction
//! error is pushed up (bounded) while the rest is pushed down.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mining;
pub mod model;
pub mod nn;
pub mod objective;
pub mod training;

pub use checkpoint::Checkpoint;
pub use data::{ContaminatedTrainset, DatasetKind, LabeledDataset, Testset};
pub use error::{NcaeError, Result};
pub use evaluation::{roc_auc, ExperimentResult, RocResult};
pub use losses::{LossBreakdown, LossWeights, NcrTarget};
pub use mining::{MinedSplit, NeighborMetric, NormalDictionary, ScoreOrdering};
pub use model::{Architecture, ImageBatch, LatentBatch, LatentCenter, ModelConfig, NcaeModel};
pub use objective::ObjectiveConfig;
pub use training::{lr_at, train, train_with, Method, TrainConfig, TrainHistory, TrainOutput};
