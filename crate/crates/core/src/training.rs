//! The joint training loop.
//!
//! Each batch runs, in order: encode and move the latent center; one Adam
//! step on each discriminator with the autoencoder frozen; build the normal
//! dictionary, score and split the batch; one Adam step on the encoder and
//! decoder with the discriminators frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ContaminatedTrainset;
use crate::error::{arg_err, config_err, NcaeError, Result};
use crate::losses::{LossBreakdown, LossWeights, NcrTarget};
use crate::mining::{
    build_dictionary, contamination_scores, select_contaminated, MinedSplit, NeighborMetric,
    ScoreOrdering,
};
use crate::model::{
    batch_mean, sample_noise, ImageBatch, LatentBatch, LatentCenter, ModelConfig, NcaeModel,
};
use crate::nn::Adam;
use crate::objective::{discriminator_objective, generator_objective, ObjectiveConfig};

/// Per-coordinate variance of the latent prior `N(μ, I)`.
pub const PRIOR_SCALE: f64 = 1.0;

pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const NOISE_STREAM: u64 = 2;

/// Rows encoded at once during the warm-up pass and at test time.
pub(crate) const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Variance of the noise that generates high-confidence normals.
    pub sigma: f64,
    /// Fraction of each batch flagged as contaminated.
    pub tau: f64,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// Center update rate.
    pub gamma: f64,
    pub margin: f64,
    pub weights: LossWeights,
    pub ncr_target: NcrTarget,
    pub ordering: ScoreOrdering,
    pub metric: NeighborMetric,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.1,
            tau: 0.1,
            batch_size: 128,
            initial_lr: 0.01,
            lr_decay: 0.1,
            lr_decay_every: 10,
            epochs: 30,
            gamma: 0.01,
            margin: 1.0,
            weights: LossWeights::default(),
            ncr_target: NcrTarget::default(),
            ordering: ScoreOrdering::default(),
            metric: NeighborMetric::default(),
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(config_err(format!(
                "sigma must lie in (0, 1], got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(config_err(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(config_err(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(config_err(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(config_err("lr_decay_every must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(config_err(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        let w = &self.weights;
        if [w.recon, w.ncr, w.adv_latent, w.adv_sample]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(config_err("loss weights must be finite and non-negative"));
        }
        self.model.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights.clone(),
            margin: self.margin,
            ncr_target: self.ncr_target,
            metric: self.metric,
        }
    }
}

/// `initial_lr · lr_decay^⌊epoch / lr_decay_every⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.initial_lr * config.lr_decay.powi((epoch / config.lr_decay_every) as i32)
}

/// Training variant: the full method, or the plain convolutional
/// autoencoder baseline (reconstruction of every sample, nothing else).
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Ncae,
    Cae,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Ncae => "NCAE",
            Method::Cae => "CAE",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = NcaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncae" => Ok(Method::Ncae),
            "cae" => Ok(Method::Cae),
            other => Err(arg_err(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub losses: LossBreakdown,
    /// Mean of the batch latents used for the center update.
    pub batch_latent_mean: Vec<f64>,
    /// Center after this step's update.
    pub mu: Vec<f64>,
    pub mu_norm: f64,
    /// Samples flagged contaminated by the configured ordering.
    pub mined: usize,
    /// Of those, how many were injected anomalies.
    pub mined_anomalies: usize,
    /// Same count had the opposite ordering been used.
    pub opposite_anomalies: usize,
    pub batch_anomalies: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_recon_normal: f64,
    /// `None` when nothing was mined.
    pub miner_precision: Option<f64>,
    /// `None` when the epoch saw no anomalies.
    pub miner_recall: Option<f64>,
    pub opposite_precision: Option<f64>,
    pub mu_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Center before the first step.
    pub initial_mu: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Miner precision pooled over the last `n` epochs.
    pub fn tail_precision(&self, n: usize) -> Option<f64> {
        let per_epoch = self
            .steps
            .iter()
            .filter(|s| s.epoch + n >= self.epochs.len());
        let (mined, hits) =
            per_epoch.fold((0, 0), |(m, h), s| (m + s.mined, h + s.mined_anomalies));
        (mined > 0).then(|| hits as f64 / mined as f64)
    }
}

/// Scores and selection of one mined batch, for diagnostics.
pub struct MiningRecord<'a> {
    pub epoch: usize,
    pub step: usize,
    pub scores: &'a [f64],
    pub hidden_truth: &'a [u8],
    pub contaminated: &'a [usize],
}

/// Hooks called as training progresses. Errors abort training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called once per NCAE step after the batch is split.
    fn on_mining(&mut self, _record: &MiningRecord<'_>) -> Result<()> {
        Ok(())
    }

    fn on_epoch(
        &mut self,
        _record: &EpochRecord,
        _model: &NcaeModel<f32>,
        _center: &LatentCenter,
    ) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct TrainOutput {
    pub model: NcaeModel<f32>,
    pub center: LatentCenter,
    pub history: TrainHistory,
}

pub fn train(config: &TrainConfig, trainset: &ContaminatedTrainset) -> Result<TrainOutput> {
    train_with(config, trainset, Method::Ncae, &mut ())
}

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Encodes a batch in fixed-size chunks.
pub(crate) fn encode_chunked(
    model: &NcaeModel<f32>,
    images: &ImageBatch<f32>,
) -> Result<LatentBatch<f32>> {
    let mut data = Vec::with_capacity(images.len() * model.latent_dim());
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        data.extend_from_slice(model.encode(&images.select(chunk))?.data());
    }
    LatentBatch::new(images.len(), model.latent_dim(), data)
}

fn count_hits(indices: &[usize], truth: &[u8]) -> usize {
    indices.iter().filter(|&&i| truth[i] == 1).count()
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains `method` on `trainset`. The model is initialised, shuffled and
/// sampled from three independent streams of `config.seed`, so the two
/// methods see identical initial weights and batch order.
pub fn train_with(
    config: &TrainConfig,
    trainset: &ContaminatedTrainset,
    method: Method,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    config.validate()?;
    if trainset.is_empty() {
        return Err(arg_err("training set is empty"));
    }
    let want = config.model.input_shape();
    if trainset.images.sample_shape() != want {
        return Err(config_err(format!(
            "model expects samples of shape {want:?}, training set has {:?}",
            trainset.images.sample_shape()
        )));
    }

    let mut model = NcaeModel::<f32>::new(
        config.model.clone(),
        config.sigma,
        &mut rng_stream(config.seed, INIT_STREAM),
    )?;
    let mut shuffle_rng = rng_stream(config.seed, SHUFFLE_STREAM);
    let mut noise_rng = rng_stream(config.seed, NOISE_STREAM);
    let objective = config.objective();
    let (mut opt_enc, mut opt_dec, mut opt_dl, mut opt_ds) = (
        Adam::default(),
        Adam::default(),
        Adam::default(),
        Adam::default(),
    );

    let mut center =
        LatentCenter::from_latents(&encode_chunked(&model, &trainset.images)?, config.gamma)?;
    let mut history = TrainHistory {
        initial_mu: center.mu.clone(),
        ..Default::default()
    };

    let n = trainset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        crate::data::shuffle(&mut order, &mut shuffle_rng);
        let first_step = history.steps.len();

        for rows in order.chunks(config.batch_size) {
            let batch = trainset.images.select(rows);
            let truth: Vec<u8> = rows.iter().map(|&i| trainset.hidden_truth[i]).collect();
            let m = batch.len();

            let latents = model.encode(&batch)?;
            let batch_latent_mean = batch_mean(&latents);
            let mut losses;
            let split;
            let opposite;
            match method {
                Method::Ncae => {
                    center = center.update(&latents)?;

                    let prior = sample_noise(&center, PRIOR_SCALE, m, &mut noise_rng)?;
                    let generated =
                        model.decode(&sample_noise(&center, config.sigma, m, &mut noise_rng)?)?;
                    let d = discriminator_objective(
                        &model,
                        &batch,
                        &latents,
                        &prior,
                        &generated,
                        &config.weights,
                        true,
                    )?;
                    if !d.latent_grads.is_empty() {
                        opt_dl.step(&mut model.latent_disc, &d.latent_grads, lr);
                    }
                    if !d.sample_grads.is_empty() {
                        opt_ds.step(&mut model.sample_disc, &d.sample_grads, lr);
                    }

                    // The encoder is untouched by the discriminator step, so
                    // `latents` still reflects the current encoder.
                    let dict =
                        build_dictionary(&model, &center, config.batch_size, &mut noise_rng)?;
                    let scores = contamination_scores(&latents, &dict)?;
                    split = select_contaminated(&scores, config.tau, config.ordering)?;
                    opposite =
                        select_contaminated(&scores, config.tau, config.ordering.opposite())?;
                    observer.on_mining(&MiningRecord {
                        epoch,
                        step,
                        scores: &scores,
                        hidden_truth: &truth,
                        contaminated: &split.contaminated_indices,
                    })?;

                    let gen_noise = sample_noise(&center, config.sigma, m, &mut noise_rng)?;
                    let g = generator_objective(
                        &model,
                        &batch,
                        &split,
                        Some(&dict),
                        Some(&gen_noise),
                        &objective,
                        true,
                    )?;
                    losses = g.breakdown;
                    losses.adv_latent_d = d.adv_latent_d;
                    losses.adv_sample_d = d.adv_sample_d;
                    losses = losses.assemble(&config.weights);
                    if losses.is_finite() {
                        opt_enc.step(&mut model.encoder, &g.encoder_grads, lr);
                        opt_dec.step(&mut model.decoder, &g.decoder_grads, lr);
                    }
                }
                Method::Cae => {
                    center = center.update(&latents)?;
                    split = MinedSplit::all_normal(m);
                    opposite = split.clone();
                    let cae = ObjectiveConfig {
                        weights: LossWeights::reconstruction_only(),
                        ..objective.clone()
                    };
                    let g = generator_objective(&model, &batch, &split, None, None, &cae, true)?;
                    losses = g.breakdown;
                    if losses.is_finite() {
                        opt_enc.step(&mut model.encoder, &g.encoder_grads, lr);
                        opt_dec.step(&mut model.decoder, &g.decoder_grads, lr);
                    }
                }
            }
            if !losses.is_finite() {
                return Err(NcaeError::NonFinite {
                    step,
                    last: Box::new(losses),
                });
            }

            let record = StepRecord {
                step,
                epoch,
                lr,
                batch_size: m,
                losses,
                batch_latent_mean,
                mu_norm: norm(&center.mu),
                mu: center.mu.clone(),
                mined: split.contaminated_indices.len(),
                mined_anomalies: count_hits(&split.contaminated_indices, &truth),
                opposite_anomalies: count_hits(&opposite.contaminated_indices, &truth),
                batch_anomalies: truth.iter().filter(|&&t| t == 1).count(),
            };
            observer.on_step(&record)?;
            history.steps.push(record);
            step += 1;
        }

        let recs = &history.steps[first_step..];
        let k = recs.len() as f64;
        let mined: usize = recs.iter().map(|r| r.mined).sum();
        let hits: usize = recs.iter().map(|r| r.mined_anomalies).sum();
        let anomalies: usize = recs.iter().map(|r| r.batch_anomalies).sum();
        let opposite: usize = recs.iter().map(|r| r.opposite_anomalies).sum();
        let record = EpochRecord {
            epoch,
            lr,
            mean_total: recs.iter().map(|r| r.losses.total).sum::<f64>() / k,
            mean_recon_normal: recs.iter().map(|r| r.losses.recon_normal).sum::<f64>() / k,
            miner_precision: ratio(hits, mined),
            miner_recall: ratio(hits, anomalies),
            opposite_precision: ratio(opposite, mined),
            mu_norm: norm(&center.mu),
        };
        observer.on_epoch(&record, &model, &center)?;
        history.epochs.push(record);
    }
    model.calibrate(&trainset.images, CHUNK)?;
    Ok(TrainOutput {
        model,
        center,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_contaminated_trainset, gaussian_toy};
    use crate::model::Architecture;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            batch_size: 128,
            epochs: 2,
            seed: 3,
            model: ModelConfig {
                architecture: Architecture::Mlp {
                    input_dim: 2,
                    hidden: vec![16],
                },
                latent_dim: 4,
                leak: 0.1,
                latent_disc_hidden: vec![8],
            },
            ..TrainConfig::default()
        }
    }

    fn toy_trainset(n_normal: usize, rho: f64) -> ContaminatedTrainset {
        build_contaminated_trainset(&gaussian_toy(n_normal, 1), 0, rho, 5).unwrap()
    }

    #[test]
    fn lr_schedule_steps_down_every_ten_epochs() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.01);
        assert_eq!(lr_at(9, &c), 0.01);
        assert!((lr_at(10, &c) - 0.001).abs() < 1e-15);
        assert!((lr_at(20, &c) - 1e-4).abs() < 1e-16);
        assert!((lr_at(25, &c) - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn step_count_and_short_batch_mining() {
        let t = toy_trainset(256, 0.0);
        assert_eq!(t.len(), 256);
        let out = train(&toy_config(), &t).unwrap();
        assert_eq!(out.history.steps.len(), 4);
        assert_eq!(out.history.epochs.len(), 2);

        let t = toy_trainset(200, 0.2);
        let out = train(&toy_config(), &t).unwrap();
        let sizes: Vec<_> = out
            .history
            .steps
            .iter()
            .map(|s| (s.batch_size, s.mined))
            .collect();
        assert_eq!(sizes, vec![(128, 13), (122, 13), (128, 13), (122, 13)]);
    }

    #[test]
    fn fixed_seed_reproduces_history_and_weights() {
        let t = toy_trainset(150, 0.2);
        let a = train(&toy_config(), &t).unwrap();
        let b = train(&toy_config(), &t).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(
            a.model.encoder.param_digest(),
            b.model.encoder.param_digest()
        );
        let c = train(
            &TrainConfig {
                seed: 4,
                ..toy_config()
            },
            &t,
        )
        .unwrap();
        assert_ne!(
            a.history.steps[0].losses.total,
            c.history.steps[0].losses.total
        );
    }

    #[test]
    fn center_trajectory_follows_the_recurrence() {
        let t = toy_trainset(150, 0.2);
        let out = train(&toy_config(), &t).unwrap();
        let mut mu = out.history.initial_mu.clone();
        for s in &out.history.steps {
            for (m, z) in mu.iter_mut().zip(&s.batch_latent_mean) {
                *m -= 0.01 * (*m - z);
            }
            for (a, b) in mu.iter().zip(&s.mu) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reduced_objective_matches_the_baseline() {
        let t = toy_trainset(150, 0.2);
        let reduced = TrainConfig {
            tau: 0.0,
            weights: LossWeights {
                adv_latent: 0.0,
                adv_sample: 0.0,
                ..LossWeights::default()
            },
            ..toy_config()
        };
        let ncae = train(&reduced, &t).unwrap();
        let cae = train_with(&toy_config(), &t, Method::Cae, &mut ()).unwrap();
        let totals = |o: &TrainOutput| {
            o.history
                .steps
                .iter()
                .map(|s| s.losses.total)
                .collect::<Vec<_>>()
        };
        assert_eq!(totals(&ncae), totals(&cae));
        assert_eq!(
            ncae.model.decoder.param_digest(),
            cae.model.decoder.param_digest()
        );
    }

    #[test]
    fn mismatched_shapes_and_bad_configs_are_rejected() {
        let t = toy_trainset(20, 0.0);
        let lenet = TrainConfig {
            model: ModelConfig::default(),
            ..toy_config()
        };
        assert!(matches!(train(&lenet, &t), Err(NcaeError::Config(_))));
        for bad in [
            TrainConfig {
                sigma: 0.0,
                ..toy_config()
            },
            TrainConfig {
                tau: 1.5,
                ..toy_config()
            },
            TrainConfig {
                batch_size: 0,
                ..toy_config()
            },
        ] {
            assert!(matches!(train(&bad, &t), Err(NcaeError::Config(_))));
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_the_step() {
        let t = toy_trainset(150, 0.0);
        let c = TrainConfig {
            initial_lr: 1e30,
            epochs: 3,
            ..toy_config()
        };
        match train(&c, &t) {
            Err(NcaeError::NonFinite { step, last }) => {
                assert!(step < 6);
                assert!(!last.is_finite());
            }
            other => panic!(
                "expected a numerical abort, got {:?}",
                other.map(|o| o.history.steps.len())
            ),
        }
    }
}
