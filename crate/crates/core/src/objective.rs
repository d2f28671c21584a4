//! Values and parameter gradients of the joint objective, split by
//! optimiser role: the two discriminators on one side, encoder and decoder
//! on the other.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::losses::{bce_with_logits, mean, squared_error, LossBreakdown, LossWeights, NcrTarget};
use crate::mining::{nearest_indices, MinedSplit, NeighborMetric, NormalDictionary};
use crate::model::{ImageBatch, LatentBatch, NcaeModel};
use crate::nn::{Gradients, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Hinge bound on the contaminated reconstruction error (pixel-mean units).
    pub margin: f64,
    pub ncr_target: NcrTarget,
    pub metric: NeighborMetric,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            margin: 1.0,
            ncr_target: NcrTarget::default(),
            metric: NeighborMetric::default(),
        }
    }
}

pub struct DiscriminatorOutcome<T> {
    pub adv_latent_d: f64,
    pub adv_sample_d: f64,
    /// Empty when gradients were not requested.
    pub latent_grads: Gradients<T>,
    pub sample_grads: Gradients<T>,
}

/// Discriminator losses: `D_l` separates prior draws from `f(x)`, `D_s`
/// separates training images from `g(ω')`. Inputs are treated as constants.
pub fn discriminator_objective<T: Scalar>(
    model: &NcaeModel<T>,
    batch: &ImageBatch<T>,
    latents: &LatentBatch<T>,
    prior: &LatentBatch<T>,
    generated: &ImageBatch<T>,
    weights: &LossWeights,
    want_grads: bool,
) -> Result<DiscriminatorOutcome<T>> {
    let mut out = DiscriminatorOutcome {
        adv_latent_d: 0.0,
        adv_sample_d: 0.0,
        latent_grads: Vec::new(),
        sample_grads: Vec::new(),
    };
    if weights.adv_latent != 0.0 {
        let (v, g) = game_side(
            &model.latent_disc,
            prior.tensor(),
            latents.tensor(),
            weights.adv_latent,
            want_grads,
        );
        out.adv_latent_d = v;
        out.latent_grads = g;
    }
    if weights.adv_sample != 0.0 {
        let (v, g) = game_side(
            &model.sample_disc,
            batch.tensor(),
            generated.tensor(),
            weights.adv_sample,
            want_grads,
        );
        out.adv_sample_d = v;
        out.sample_grads = g;
    }
    Ok(out)
}

fn scale<T: Scalar>(g: &mut [T], w: f64) {
    if w != 1.0 {
        let w = T::of(w);
        g.iter_mut().for_each(|v| *v *= w);
    }
}

fn game_side<T: Scalar>(
    disc: &crate::nn::Network<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    weight: f64,
    want_grads: bool,
) -> (f64, Gradients<T>) {
    let (lr, tr) = disc.forward_trace(real);
    let (lf, tf) = disc.forward_trace(fake);
    let (vr, mut gr) = bce_with_logits(lr.data(), true);
    let (vf, mut gf) = bce_with_logits(lf.data(), false);
    if !want_grads {
        return (vr + vf, Vec::new());
    }
    scale(&mut gr, weight);
    scale(&mut gf, weight);
    let mut grads = disc.zero_grads();
    disc.backward(&tr, &Tensor::new(lr.shape().to_vec(), gr), Some(&mut grads));
    disc.backward(&tf, &Tensor::new(lf.shape().to_vec(), gf), Some(&mut grads));
    (vr + vf, grads)
}

pub struct GeneratorOutcome<T> {
    /// Generator-side terms; the discriminator-side fields are zero.
    pub breakdown: LossBreakdown,
    pub encoder_grads: Gradients<T>,
    pub decoder_grads: Gradients<T>,
    /// Dictionary row matched to each contaminated sample (nearest-generated target only).
    pub matched_rows: Vec<usize>,
}

/// Gradient of `sign·mean_i min(‖aᵢ − bᵢ‖²/D, margin)` w.r.t. `b`, written into `out` rows.
fn error_grad<T: Scalar>(a: &[T], b: &[T], coef: f64, out: &mut [T]) {
    let d = a.len() as f64;
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o += T::of(coef * 2.0 * (y.f64() - x.f64()) / d);
    }
}

/// NCR term plus the encoder- and decoder-side adversarial terms.
pub fn generator_objective<T: Scalar>(
    model: &NcaeModel<T>,
    batch: &ImageBatch<T>,
    split: &MinedSplit,
    dictionary: Option<&NormalDictionary<T>>,
    gen_noise: Option<&LatentBatch<T>>,
    config: &ObjectiveConfig,
    want_grads: bool,
) -> Result<GeneratorOutcome<T>> {
    let m = batch.len();
    if split.contaminated_indices.len() + split.normal_indices.len() != m {
        return Err(arg_err(format!(
            "split covers {} of {m} samples",
            split.contaminated_indices.len() + split.normal_indices.len()
        )));
    }
    if !(config.margin >= 0.0) {
        return Err(arg_err(format!(
            "margin must be non-negative, got {}",
            config.margin
        )));
    }
    let w = &config.weights;
    let x = batch.tensor();
    let (z, enc_tr) = model.encoder.forward_trace(x);
    let (xbar, dec_tr) = model.decoder.forward_trace(&z);
    let pixels = batch.pixels_per_sample();

    let mut g_xbar = Tensor::<T>::zeros(xbar.shape().to_vec());
    let mut dec_grads = if want_grads {
        model.decoder.zero_grads()
    } else {
        Vec::new()
    };
    let mut enc_grads = if want_grads {
        model.encoder.zero_grads()
    } else {
        Vec::new()
    };

    let normal_errs: Vec<f64> = split
        .normal_indices
        .iter()
        .map(|&i| squared_error(x.row(i), xbar.row(i)))
        .collect();
    let mut bd = LossBreakdown {
        recon_normal: mean(&normal_errs),
        ..Default::default()
    };
    if want_grads && w.recon != 0.0 && !split.normal_indices.is_empty() {
        let coef = w.recon / split.normal_indices.len() as f64;
        for &i in &split.normal_indices {
            let out = &mut g_xbar.data_mut()[i * pixels..(i + 1) * pixels];
            error_grad(x.row(i), xbar.row(i), coef, out);
        }
    }

    let mut matched_rows = Vec::new();
    let cont = &split.contaminated_indices;
    if !cont.is_empty() && w.ncr != 0.0 {
        let coef = -w.ncr / cont.len() as f64;
        match config.ncr_target {
            NcrTarget::OwnReconstruction => {
                let mut bounded = Vec::with_capacity(cont.len());
                for &i in cont {
                    let e = squared_error(x.row(i), xbar.row(i));
                    bounded.push(e.min(config.margin));
                    if want_grads && e < config.margin {
                        let out = &mut g_xbar.data_mut()[i * pixels..(i + 1) * pixels];
                        error_grad(x.row(i), xbar.row(i), coef, out);
                    }
                }
                bd.recon_contaminated_term = -mean(&bounded);
            }
            NcrTarget::NearestGenerated => {
                let dictionary = dictionary
                    .ok_or_else(|| arg_err("the nearest-generated target needs a dictionary"))?;
                let cz = LatentBatch::from_tensor(z.gather_rows(cont));
                matched_rows = nearest_indices(&cz, dictionary, config.metric)?;
                let noise = dictionary.noise().tensor().gather_rows(&matched_rows);
                let (xg, tr) = model.decoder.forward_trace(&noise);
                let mut gg = Tensor::<T>::zeros(xg.shape().to_vec());
                let mut bounded = Vec::with_capacity(cont.len());
                for (k, &i) in cont.iter().enumerate() {
                    let e = squared_error(x.row(i), xg.row(k));
                    bounded.push(e.min(config.margin));
                    if want_grads && e < config.margin {
                        let out = &mut gg.data_mut()[k * pixels..(k + 1) * pixels];
                        error_grad(x.row(i), xg.row(k), coef, out);
                    }
                }
                bd.recon_contaminated_term = -mean(&bounded);
                if want_grads {
                    model.decoder.backward(&tr, &gg, Some(&mut dec_grads));
                }
            }
        }
    }

    let mut g_z = Tensor::<T>::zeros(z.shape().to_vec());
    if w.adv_latent != 0.0 {
        let (logits, tr) = model.latent_disc.forward_trace(&z);
        let (v, mut g) = bce_with_logits(logits.data(), true);
        bd.adv_latent_g = v;
        if want_grads {
            scale(&mut g, w.adv_latent);
            g_z = model
                .latent_disc
                .backward(&tr, &Tensor::new(logits.shape().to_vec(), g), None);
        }
    }
    if w.adv_sample != 0.0 {
        let gen_noise = gen_noise
            .ok_or_else(|| arg_err("the sample adversarial term needs generator noise"))?;
        let (xg, tr_dec) = model.decoder.forward_trace(gen_noise.tensor());
        let (logits, tr) = model.sample_disc.forward_trace(&xg);
        let (v, mut g) = bce_with_logits(logits.data(), true);
        bd.adv_sample_g = v;
        if want_grads {
            scale(&mut g, w.adv_sample);
            let gx =
                model
                    .sample_disc
                    .backward(&tr, &Tensor::new(logits.shape().to_vec(), g), None);
            model.decoder.backward(&tr_dec, &gx, Some(&mut dec_grads));
        }
    }

    if want_grads {
        let gz_rec = model
            .decoder
            .backward(&dec_tr, &g_xbar, Some(&mut dec_grads));
        let mut gz = gz_rec;
        for (a, &b) in gz.data_mut().iter_mut().zip(g_z.data()) {
            *a += b;
        }
        model.encoder.backward(&enc_tr, &gz, Some(&mut enc_grads));
    }
    Ok(GeneratorOutcome {
        breakdown: bd.assemble(w),
        encoder_grads: enc_grads,
        decoder_grads: dec_grads,
        matched_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::{select_contaminated, ScoreOrdering};
    use crate::model::{sample_noise, Architecture, LatentCenter, ModelConfig};
    use crate::nn::Network;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> NcaeModel<f64> {
        let cfg = ModelConfig {
            architecture: Architecture::Mlp {
                input_dim: 2,
                hidden: vec![6],
            },
            latent_dim: 2,
            leak: 0.1,
            latent_disc_hidden: vec![5, 4],
        };
        NcaeModel::new(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(21)).unwrap()
    }

    struct Fixture {
        model: NcaeModel<f64>,
        batch: ImageBatch<f64>,
        latents: LatentBatch<f64>,
        prior: LatentBatch<f64>,
        gen_noise: LatentBatch<f64>,
        dict: NormalDictionary<f64>,
        split: MinedSplit,
    }

    fn fixture() -> Fixture {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = 8;
        let batch = ImageBatch::new(
            [b, 1, 1, 2],
            (0..2 * b).map(|_| rng.gen_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let latents = model.encode(&batch).unwrap();
        let center = LatentCenter::from_latents(&latents, 0.01).unwrap();
        let prior = sample_noise(&center, 1.0, b, &mut rng).unwrap();
        let gen_noise = sample_noise(&center, model.sigma, b, &mut rng).unwrap();
        // The toy encoder maps decoded noise onto almost one direction, which
        // makes nearest-row matching borderline. Matching keys are therefore
        // spread around the circle and rotated until no match is ambiguous.
        let rows = 6;
        let noise = sample_noise(&center, model.sigma, rows, &mut rng).unwrap();
        let images = model.decode(&noise).unwrap();
        for step in 0..60 {
            let offset = step as f64 * 0.017;
            let keys: Vec<f64> = (0..rows)
                .flat_map(|k| {
                    let a = offset + k as f64 * std::f64::consts::TAU / rows as f64;
                    [a.cos(), a.sin()]
                })
                .collect();
            let keys = LatentBatch::new(rows, 2, keys).unwrap();
            let dict = NormalDictionary::from_parts(noise.clone(), images.clone(), keys).unwrap();
            let scores = crate::mining::contamination_scores(&latents, &dict).unwrap();
            let split = select_contaminated(&scores, 0.25, ScoreOrdering::Descending).unwrap();
            let f = Fixture {
                model: model.clone(),
                batch: batch.clone(),
                latents: latents.clone(),
                prior: prior.clone(),
                gen_noise: gen_noise.clone(),
                dict,
                split,
            };
            if min_match_gap(&f) > 0.01 {
                return f;
            }
        }
        panic!("no well-separated dictionary");
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs());
        if denom < 1e-9 {
            (a - b).abs()
        } else {
            (a - b).abs() / denom
        }
    }

    /// Central differences on a strided subset of one network's parameters.
    /// The step is small so that LeakyReLU kinks are not straddled.
    fn check(
        net: fn(&mut NcaeModel<f64>) -> &mut Network<f64>,
        model: &NcaeModel<f64>,
        grads: &Gradients<f64>,
        value: &dyn Fn(&NcaeModel<f64>) -> f64,
    ) -> usize {
        let h = 1e-6;
        let mut checked = 0;
        let mut worst = 0.0f64;
        for (pi, g) in grads.iter().enumerate() {
            for j in (0..g.len()).step_by(3) {
                let mut plus = model.clone();
                net(&mut plus).params_mut()[pi][j] += h;
                let mut minus = model.clone();
                net(&mut minus).params_mut()[pi][j] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(g[j], fd));
                checked += 1;
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
        checked
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let f = fixture();
        let generated = f.model.decode(&f.gen_noise).unwrap();
        let w = LossWeights::default();
        let out = discriminator_objective(
            &f.model, &f.batch, &f.latents, &f.prior, &generated, &w, true,
        )
        .unwrap();
        let value_l = |m: &NcaeModel<f64>| {
            discriminator_objective(m, &f.batch, &f.latents, &f.prior, &generated, &w, false)
                .unwrap()
                .adv_latent_d
        };
        let value_s = |m: &NcaeModel<f64>| {
            discriminator_objective(m, &f.batch, &f.latents, &f.prior, &generated, &w, false)
                .unwrap()
                .adv_sample_d
        };
        assert!(
            check(
                |m| &mut m.latent_disc,
                &f.model,
                &out.latent_grads,
                &value_l
            ) > 0
        );
        assert!(
            check(
                |m| &mut m.sample_disc,
                &f.model,
                &out.sample_grads,
                &value_s
            ) > 0
        );
    }

    /// Cosine gap between the best and second-best dictionary row of each
    /// contaminated latent; finite differences are only valid when the
    /// nearest-neighbour choice cannot flip under a small perturbation.
    fn min_match_gap(f: &Fixture) -> f64 {
        let mut gap = f64::INFINITY;
        for &i in &f.split.contaminated_indices {
            let q = crate::mining::l2_normalize(f.latents.row(i));
            let mut sims: Vec<f64> = (0..f.dict.len())
                .map(|j| q.iter().zip(f.dict.unit_row(j)).map(|(a, b)| a * b).sum())
                .collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            gap = gap.min(sims[0] - sims[1]);
        }
        gap
    }

    #[test]
    fn generator_gradients_match_finite_differences_for_both_targets() {
        let f = fixture();
        assert!(!f.split.contaminated_indices.is_empty());
        for target in [NcrTarget::NearestGenerated, NcrTarget::OwnReconstruction] {
            let cfg = ObjectiveConfig {
                ncr_target: target,
                ..ObjectiveConfig::default()
            };
            let out = generator_objective(
                &f.model,
                &f.batch,
                &f.split,
                Some(&f.dict),
                Some(&f.gen_noise),
                &cfg,
                true,
            )
            .unwrap();
            let value = |m: &NcaeModel<f64>| {
                generator_objective(
                    m,
                    &f.batch,
                    &f.split,
                    Some(&f.dict),
                    Some(&f.gen_noise),
                    &cfg,
                    false,
                )
                .unwrap()
                .breakdown
                .total
            };
            check(|m| &mut m.encoder, &f.model, &out.encoder_grads, &value);
            check(|m| &mut m.decoder, &f.model, &out.decoder_grads, &value);
        }
    }

    #[test]
    fn empty_contaminated_set_reduces_to_reconstruction() {
        let f = fixture();
        let split = MinedSplit::all_normal(f.batch.len());
        let cfg = ObjectiveConfig {
            weights: LossWeights::reconstruction_only(),
            ..ObjectiveConfig::default()
        };
        let out = generator_objective(
            &f.model,
            &f.batch,
            &split,
            Some(&f.dict),
            Some(&f.gen_noise),
            &cfg,
            false,
        )
        .unwrap();
        let xr = f.model.reconstruct(&f.batch).unwrap();
        assert_eq!(
            out.breakdown.total,
            crate::losses::reconstruction_loss(&f.batch, &xr).unwrap()
        );
    }

    #[test]
    fn split_must_cover_the_batch() {
        let f = fixture();
        let bad = MinedSplit::all_normal(3);
        let r = generator_objective(
            &f.model,
            &f.batch,
            &bad,
            Some(&f.dict),
            Some(&f.gen_noise),
            &ObjectiveConfig::default(),
            false,
        );
        assert!(r.is_err());
    }
}
