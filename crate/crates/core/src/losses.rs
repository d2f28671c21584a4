//! Loss terms: reconstruction, normality-calibrated reconstruction (NCR),
//! and the two adversarial games, plus their weighted assembly.
//!
//! Reductions are means over the batch and over pixels, so a per-sample
//! error is `‖x − x̄‖² / D`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::mining::{MinedSplit, NormalDictionary};
use crate::model::{ImageBatch, LatentBatch, NcaeModel};
use crate::nn::{sigmoid, Scalar};
use crate::objective::{discriminator_objective, generator_objective, ObjectiveConfig};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// What the contaminated samples' reconstruction error is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NcrTarget {
    /// The sample's own reconstruction `g(f(x))`.
    OwnReconstruction,
    /// The generated normal sample nearest to `f(x)` in latent space.
    #[default]
    NearestGenerated,
}

/// Per-term weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub ncr: f64,
    pub adv_latent: f64,
    pub adv_sample: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            ncr: 1.0,
            adv_latent: 1.0,
            adv_sample: 1.0,
        }
    }
}

impl LossWeights {
    /// Reconstruction only, as for the plain convolutional autoencoder.
    pub fn reconstruction_only() -> Self {
        LossWeights {
            recon: 1.0,
            ncr: 0.0,
            adv_latent: 0.0,
            adv_sample: 0.0,
        }
    }
}

/// `w·v`, except that a zero weight switches the term off entirely.
pub(crate) fn weighted(w: f64, v: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * v
    }
}

/// Per-term values of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean reconstruction error over the predicted-normal samples.
    pub recon_normal: f64,
    /// `−mean min(error, margin)` over the predicted-contaminated samples (≤ 0).
    pub recon_contaminated_term: f64,
    pub adv_latent_d: f64,
    pub adv_latent_g: f64,
    pub adv_sample_d: f64,
    pub adv_sample_g: f64,
    /// Weighted objective minimised by the encoder and decoder.
    pub total: f64,
    /// Weighted objective minimised by the two discriminators.
    pub total_discriminator: f64,
}

impl LossBreakdown {
    pub fn assemble(mut self, w: &LossWeights) -> Self {
        self.total = weighted(w.recon, self.recon_normal)
            + weighted(w.ncr, self.recon_contaminated_term)
            + weighted(w.adv_latent, self.adv_latent_g)
            + weighted(w.adv_sample, self.adv_sample_g);
        self.total_discriminator =
            weighted(w.adv_latent, self.adv_latent_d) + weighted(w.adv_sample, self.adv_sample_d);
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_normal,
            self.recon_contaminated_term,
            self.adv_latent_d,
            self.adv_latent_g,
            self.adv_sample_d,
            self.adv_sample_g,
            self.total,
            self.total_discriminator,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_pair<T: Scalar>(x: &ImageBatch<T>, x_bar: &ImageBatch<T>) -> Result<()> {
    if x.tensor().shape() != x_bar.tensor().shape() {
        return Err(arg_err(format!(
            "shape {:?} does not match reconstruction shape {:?}",
            x.tensor().shape(),
            x_bar.tensor().shape()
        )));
    }
    Ok(())
}

pub(crate) fn squared_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let d = p.f64() - q.f64();
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// Pixel-mean squared error of every sample.
pub fn per_sample_errors<T: Scalar>(x: &ImageBatch<T>, x_bar: &ImageBatch<T>) -> Result<Vec<f64>> {
    check_pair(x, x_bar)?;
    Ok((0..x.len())
        .map(|i| squared_error(x.sample(i), x_bar.sample(i)))
        .collect())
}

/// Mean over the batch of the per-sample pixel-mean squared error.
pub fn reconstruction_loss<T: Scalar>(x: &ImageBatch<T>, x_bar: &ImageBatch<T>) -> Result<f64> {
    let e = per_sample_errors(x, x_bar)?;
    Ok(mean(&e))
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The two parts of the NCR loss and their difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NcrValue {
    pub recon_normal: f64,
    pub contaminated_term: f64,
    pub total: f64,
}

/// NCR value from precomputed per-sample errors. Contaminated errors are
/// hinge-bounded at `margin`; an empty side contributes zero.
pub fn ncr_from_errors(normal: &[f64], contaminated: &[f64], margin: f64) -> Result<NcrValue> {
    if !(margin >= 0.0) {
        return Err(arg_err(format!(
            "margin must be non-negative, got {margin}"
        )));
    }
    let recon_normal = mean(normal);
    let bounded: Vec<f64> = contaminated.iter().map(|e| e.min(margin)).collect();
    let contaminated_term = -mean(&bounded);
    Ok(NcrValue {
        recon_normal,
        contaminated_term,
        total: recon_normal + contaminated_term,
    })
}

/// Minimise reconstruction error on predicted-normal samples and maximise it,
/// bounded by `margin`, on predicted-contaminated ones (`None` = empty set).
pub fn ncr_loss<T: Scalar>(
    x_normal: &ImageBatch<T>,
    x_bar_normal: &ImageBatch<T>,
    contaminated: Option<(&ImageBatch<T>, &ImageBatch<T>)>,
    margin: f64,
) -> Result<NcrValue> {
    let normal = per_sample_errors(x_normal, x_bar_normal)?;
    let cont = match contaminated {
        Some((x, xb)) => per_sample_errors(x, xb)?,
        None => Vec::new(),
    };
    ncr_from_errors(&normal, &cont, margin)
}

fn clamp_prob<T: Scalar>(p: T) -> f64 {
    p.f64().clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean_of<T: Scalar>(v: &[T], f: impl Fn(f64) -> f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|p| f(clamp_prob(*p))).sum::<f64>() / v.len() as f64
}

/// Discriminator side: `−mean log d_real − mean log(1 − d_fake)`.
pub fn adversarial_discriminator_loss<T: Scalar>(d_real: &[T], d_fake: &[T]) -> f64 {
    mean_of(d_real, |p| -p.ln()) + mean_of(d_fake, |p| -(1.0 - p).ln())
}

/// Generator side, non-saturating: `−mean log d_fake`.
pub fn adversarial_generator_loss<T: Scalar>(d_fake: &[T]) -> f64 {
    mean_of(d_fake, |p| -p.ln())
}

/// Latent game, discriminator side. `d_real` on prior draws, `d_fake` on `f(x)`.
pub fn adv_latent_loss_d<T: Scalar>(d_real: &[T], d_fake: &[T]) -> f64 {
    adversarial_discriminator_loss(d_real, d_fake)
}

/// Latent game, encoder side.
pub fn adv_latent_loss_g<T: Scalar>(d_fake: &[T]) -> f64 {
    adversarial_generator_loss(d_fake)
}

/// Sample game, discriminator side. `d_real` on training images, `d_fake` on `g(ω')`.
pub fn adv_sample_loss_d<T: Scalar>(d_real: &[T], d_fake: &[T]) -> f64 {
    adversarial_discriminator_loss(d_real, d_fake)
}

/// Sample game, decoder side.
pub fn adv_sample_loss_g<T: Scalar>(d_fake: &[T]) -> f64 {
    adversarial_generator_loss(d_fake)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy on logits against an all-real (`true`) or all-fake
/// target. Returns the batch mean and its gradient w.r.t. each logit.
pub fn bce_with_logits<T: Scalar>(logits: &[T], real: bool) -> (f64, Vec<T>) {
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .map(|&l| {
            let lf = l.f64();
            let s = sigmoid(lf);
            if real {
                loss += softplus(-lf);
                T::of((s - 1.0) / n)
            } else {
                loss += softplus(lf);
                T::of(s / n)
            }
        })
        .collect();
    (loss / n, grad)
}

/// Evaluates every term of the joint objective for one batch without
/// updating anything. `prior` are draws from `N(μ, I)` for the latent game,
/// `gen_noise` draws from `N(μ, σI)` for the sample game.
#[allow(clippy::too_many_arguments)]
pub fn joint_losses<T: Scalar>(
    model: &NcaeModel<T>,
    batch: &ImageBatch<T>,
    split: &MinedSplit,
    dictionary: &NormalDictionary<T>,
    prior: &LatentBatch<T>,
    gen_noise: &LatentBatch<T>,
    config: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let latents = model.encode(batch)?;
    let generated = model.decode(gen_noise)?;
    let disc = discriminator_objective(
        model,
        batch,
        &latents,
        prior,
        &generated,
        &config.weights,
        false,
    )?;
    let gen = generator_objective(
        model,
        batch,
        split,
        Some(dictionary),
        Some(gen_noise),
        config,
        false,
    )?;
    Ok(LossBreakdown {
        adv_latent_d: disc.adv_latent_d,
        adv_sample_d: disc.adv_sample_d,
        ..gen.breakdown
    }
    .assemble(&config.weights))
}
