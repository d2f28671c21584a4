//! The four networks (encoder, decoder, latent and sample discriminators),
//! the Gaussian noise sources, and the running latent center.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::nn::{sigmoid, Layer, Network, Scalar, Tensor};

/// A batch of images `[b, c, h, w]` with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32>(Tensor<T>);

impl<T: Scalar> ImageBatch<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape[0] == 0 {
            return Err(arg_err("image batch must hold at least one sample"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(arg_err(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(arg_err(format!("pixel value {v:?} outside [0, 1]")));
        }
        Ok(ImageBatch(Tensor::new(shape.to_vec(), data)))
    }

    /// Wraps a tensor already known to satisfy the pixel bounds.
    pub(crate) fn from_tensor(t: Tensor<T>) -> Self {
        debug_assert_eq!(t.shape().len(), 4);
        ImageBatch(t)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.0.shape()[1..]
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.0.row_len()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        ImageBatch(self.0.gather_rows(idx))
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }
}

/// A batch of latent codes `[b, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T = f32>(Tensor<T>);

impl<T: Scalar> LatentBatch<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if rows * dim != data.len() {
            return Err(arg_err(format!(
                "{} values do not fill [{rows}, {dim}]",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(arg_err("latent values must be finite"));
        }
        Ok(LatentBatch(Tensor::new(vec![rows, dim], data)))
    }

    pub(crate) fn from_tensor(t: Tensor<T>) -> Self {
        debug_assert_eq!(t.shape().len(), 2);
        LatentBatch(t)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        LatentBatch(self.0.gather_rows(idx))
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }
}

/// Running mean of the latent features, moved toward each batch mean at rate `gamma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCenter {
    pub mu: Vec<f64>,
    pub gamma: f64,
    pub step: u64,
}

impl LatentCenter {
    /// Center initialised to the mean of `latents` (all training latents at step 0).
    pub fn from_latents<T: Scalar>(latents: &LatentBatch<T>, gamma: f64) -> Result<Self> {
        if latents.is_empty() {
            return Err(arg_err(
                "cannot initialise the latent center from zero latents",
            ));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(arg_err(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        Ok(LatentCenter {
            mu: batch_mean(latents),
            gamma,
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu' = mu − γ·(1/m)·Σᵢ (mu − zᵢ)`, step incremented.
    pub fn update<T: Scalar>(&self, latents: &LatentBatch<T>) -> Result<Self> {
        if latents.is_empty() {
            return Err(arg_err("latent center update needs a non-empty batch"));
        }
        if latents.dim() != self.dim() {
            return Err(config_err(format!(
                "latent dim {} does not match center dim {}",
                latents.dim(),
                self.dim()
            )));
        }
        let m = latents.len() as f64;
        let mut diff = vec![0.0; self.dim()];
        for i in 0..latents.len() {
            for ((acc, mu), z) in diff.iter_mut().zip(&self.mu).zip(latents.row(i)) {
                *acc += mu - z.f64();
            }
        }
        let mu = self
            .mu
            .iter()
            .zip(&diff)
            .map(|(mu, d)| mu - self.gamma * (d / m))
            .collect();
        Ok(LatentCenter {
            mu,
            gamma: self.gamma,
            step: self.step + 1,
        })
    }
}

pub fn update_center<T: Scalar>(
    center: &LatentCenter,
    latents: &LatentBatch<T>,
) -> Result<LatentCenter> {
    center.update(latents)
}

pub(crate) fn batch_mean<T: Scalar>(latents: &LatentBatch<T>) -> Vec<f64> {
    let mut mean = vec![0.0; latents.dim()];
    for i in 0..latents.len() {
        for (acc, z) in mean.iter_mut().zip(latents.row(i)) {
            *acc += z.f64();
        }
    }
    let n = latents.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// `count` draws from `N(mu, scale·I)`; `scale` is the per-coordinate variance.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(
    center: &LatentCenter,
    scale: f64,
    count: usize,
    rng: &mut R,
) -> Result<LatentBatch<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(arg_err(format!(
            "noise scale must be positive, got {scale}"
        )));
    }
    if count == 0 {
        return Err(arg_err("noise count must be at least 1"));
    }
    let std = scale.sqrt();
    let d = center.dim();
    let mut data = Vec::with_capacity(count * d);
    for _ in 0..count {
        for mu in &center.mu {
            let z: f64 = rng.sample(StandardNormal);
            data.push(T::of(mu + std * z));
        }
    }
    LatentBatch::new(count, d, data)
}

/// Network family used for the encoder, decoder and sample discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Two conv/pool stages on 28×28 grayscale input, mirrored by transposed
    /// convolutions. `batch_norm` inserts affine-free batch normalisation
    /// before each hidden activation (off by default).
    #[serde(rename = "lenet")]
    LeNet {
        channels: [usize; 2],
        kernel: usize,
        #[serde(default)]
        batch_norm: bool,
    },
    /// Fully connected stack on flat inputs of `input_dim` features (toy data).
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
    },
}

/// Variance floor of the normalisation layers.
const BN_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub latent_dim: usize,
    /// Negative-side slope of the leaky ReLUs.
    pub leak: f64,
    /// Hidden widths of the latent discriminator.
    pub latent_disc_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::LeNet {
                channels: [8, 4],
                kernel: 5,
                batch_norm: false,
            },
            latent_dim: 32,
            leak: 0.1,
            latent_disc_hidden: vec![64, 32],
        }
    }
}

impl ModelConfig {
    pub fn input_shape(&self) -> [usize; 3] {
        match &self.architecture {
            Architecture::LeNet { .. } => [1, 28, 28],
            Architecture::Mlp { input_dim, .. } => [1, 1, *input_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(config_err("latent_dim must be positive"));
        }
        if !(self.leak >= 0.0 && self.leak < 1.0) {
            return Err(config_err(format!(
                "leak must lie in [0, 1), got {}",
                self.leak
            )));
        }
        match &self.architecture {
            Architecture::LeNet {
                channels, kernel, ..
            } => {
                if channels.contains(&0) || *kernel == 0 || kernel % 2 == 0 {
                    return Err(config_err(
                        "lenet needs positive channels and an odd kernel",
                    ));
                }
            }
            Architecture::Mlp { input_dim, hidden } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(config_err("mlp widths must be positive"));
                }
            }
        }
        if self.latent_disc_hidden.contains(&0) {
            return Err(config_err("latent discriminator widths must be positive"));
        }
        Ok(())
    }
}

/// Encoder `f`, decoder `g`, latent discriminator `D_l` and sample discriminator `D_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NcaeModel<T = f32> {
    pub config: ModelConfig,
    /// Variance scale of the generator noise, in `[0, 1]`.
    pub sigma: f64,
    pub encoder: Network<T>,
    pub decoder: Network<T>,
    pub latent_disc: Network<T>,
    pub sample_disc: Network<T>,
}

fn mlp<T: Scalar, R: Rng + ?Sized>(widths: &[usize], leak: f64, rng: &mut R) -> Vec<Layer<T>> {
    let mut layers = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        layers.push(Layer::dense(w[0], w[1], rng));
        if i + 2 < widths.len() {
            layers.push(Layer::LeakyRelu { slope: leak });
        }
    }
    layers
}

/// Optional normalisation followed by a leaky ReLU.
fn activation<T: Scalar>(channels: usize, bn: bool, leak: f64) -> Vec<Layer<T>> {
    let mut v = Vec::with_capacity(2);
    if bn {
        v.push(Layer::batch_norm(channels, BN_EPS));
    }
    v.push(Layer::LeakyRelu { slope: leak });
    v
}

fn conv_stack<T: Scalar, R: Rng + ?Sized>(
    channels: [usize; 2],
    kernel: usize,
    bn: bool,
    leak: f64,
    rng: &mut R,
) -> Vec<Layer<T>> {
    let pad = kernel / 2;
    let mut v = vec![Layer::conv2d(1, channels[0], kernel, pad, rng)];
    v.extend(activation(channels[0], bn, leak));
    v.push(Layer::MaxPool2d { size: 2 });
    v.push(Layer::conv2d(channels[0], channels[1], kernel, pad, rng));
    v.extend(activation(channels[1], bn, leak));
    v.push(Layer::MaxPool2d { size: 2 });
    v.push(Layer::Reshape {
        shape: vec![channels[1] * 7 * 7],
    });
    v
}

impl<T: Scalar> NcaeModel<T> {
    /// Fresh model. Networks are initialised in the order encoder, decoder,
    /// latent discriminator, sample discriminator, so equal seeds give equal
    /// autoencoders regardless of what the discriminators are used for.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, sigma: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if !(0.0..=1.0).contains(&sigma) {
            return Err(config_err(format!("sigma must lie in [0, 1], got {sigma}")));
        }
        let d = config.latent_dim;
        let leak = config.leak;
        let input = config.input_shape().to_vec();
        let (encoder, decoder) = match &config.architecture {
            Architecture::LeNet {
                channels,
                kernel,
                batch_norm: bn,
            } => {
                let (c0, c1, k, bn) = (channels[0], channels[1], *kernel, *bn);
                let flat = c1 * 7 * 7;
                let mut enc = conv_stack(*channels, k, bn, leak, rng);
                enc.push(Layer::dense(flat, d, rng));
                let mut dec = vec![Layer::dense(d, flat, rng)];
                dec.extend(activation(flat, bn, leak));
                dec.push(Layer::Reshape {
                    shape: vec![c1, 7, 7],
                });
                dec.push(Layer::conv_transpose2d(c1, c0, k, 2, k / 2, 1, rng));
                dec.extend(activation(c0, bn, leak));
                dec.push(Layer::conv_transpose2d(c0, 1, k, 2, k / 2, 1, rng));
                dec.push(Layer::Sigmoid);
                (enc, dec)
            }
            Architecture::Mlp { input_dim, hidden } => {
                let mut widths = vec![*input_dim];
                widths.extend(hidden);
                widths.push(d);
                let mut enc = vec![Layer::Reshape {
                    shape: vec![*input_dim],
                }];
                enc.extend(mlp(&widths, leak, rng));
                widths.reverse();
                let mut dec = mlp(&widths, leak, rng);
                dec.push(Layer::Sigmoid);
                dec.push(Layer::Reshape {
                    shape: vec![1, 1, *input_dim],
                });
                (enc, dec)
            }
        };
        let mut dl_widths = vec![d];
        dl_widths.extend(&config.latent_disc_hidden);
        dl_widths.push(1);
        let latent_disc = mlp(&dl_widths, leak, rng);
        let sample_disc = match &config.architecture {
            Architecture::LeNet {
                channels,
                kernel,
                batch_norm,
            } => {
                let mut ds = conv_stack(*channels, *kernel, *batch_norm, leak, rng);
                ds.push(Layer::dense(channels[1] * 7 * 7, 1, rng));
                ds
            }
            Architecture::Mlp { input_dim, hidden } => {
                let mut widths = vec![*input_dim];
                widths.extend(hidden);
                widths.push(1);
                let mut ds = vec![Layer::Reshape {
                    shape: vec![*input_dim],
                }];
                ds.extend(mlp(&widths, leak, rng));
                ds
            }
        };
        Ok(NcaeModel {
            encoder: Network::new(input.clone(), encoder).map_err(config_err)?,
            decoder: Network::new(vec![d], decoder).map_err(config_err)?,
            latent_disc: Network::new(vec![d], latent_disc).map_err(config_err)?,
            sample_disc: Network::new(input, sample_disc).map_err(config_err)?,
            config,
            sigma,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape()
    }

    fn check_images(&self, batch: &ImageBatch<T>) -> Result<()> {
        if batch.sample_shape() != self.input_shape() {
            return Err(config_err(format!(
                "input shape {:?} does not match the model's {:?}",
                batch.sample_shape(),
                self.input_shape()
            )));
        }
        Ok(())
    }

    fn check_latents(&self, latents: &LatentBatch<T>) -> Result<()> {
        if latents.dim() != self.latent_dim() {
            return Err(config_err(format!(
                "latent dim {} does not match the model's {}",
                latents.dim(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    /// `z = f(x)`.
    pub fn encode(&self, batch: &ImageBatch<T>) -> Result<LatentBatch<T>> {
        self.check_images(batch)?;
        Ok(LatentBatch::from_tensor(
            self.encoder.forward(batch.tensor()),
        ))
    }

    /// `x̄ = g(z)`, bounded to `[0, 1]` by the output sigmoid.
    pub fn decode(&self, latents: &LatentBatch<T>) -> Result<ImageBatch<T>> {
        self.check_latents(latents)?;
        Ok(ImageBatch::from_tensor(
            self.decoder.forward(latents.tensor()),
        ))
    }

    pub fn reconstruct(&self, batch: &ImageBatch<T>) -> Result<ImageBatch<T>> {
        self.decode(&self.encode(batch)?)
    }

    pub fn latent_logits(&self, latents: &LatentBatch<T>) -> Result<Vec<T>> {
        self.check_latents(latents)?;
        Ok(self.latent_disc.forward(latents.tensor()).into_data())
    }

    pub fn sample_logits(&self, batch: &ImageBatch<T>) -> Result<Vec<T>> {
        self.check_images(batch)?;
        Ok(self.sample_disc.forward(batch.tensor()).into_data())
    }

    /// `D_l(z)`: probability that each latent row was drawn from the Gaussian prior.
    pub fn discriminate_latent(&self, latents: &LatentBatch<T>) -> Result<Vec<T>> {
        Ok(self
            .latent_logits(latents)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// `D_s(x)`: probability that each image is a real training sample.
    pub fn discriminate_sample(&self, batch: &ImageBatch<T>) -> Result<Vec<T>> {
        Ok(self
            .sample_logits(batch)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Fits the stored normalisation statistics of the encoder, decoder and
    /// sample discriminator to `images` and switches all networks to eval
    /// mode. The decoder is fitted on the (already calibrated) codes of
    /// `images`. A no-op apart from the mode switch when no network normalises.
    pub fn calibrate(&mut self, images: &ImageBatch<T>, chunk: usize) -> Result<()> {
        self.check_images(images)?;
        self.encoder.calibrate(images.tensor(), chunk);
        let mut codes = Vec::with_capacity(images.len() * self.latent_dim());
        let chunk = chunk.max(1);
        for start in (0..images.len()).step_by(chunk) {
            let rows: Vec<usize> = (start..(start + chunk).min(images.len())).collect();
            codes.extend(
                self.encoder
                    .forward(&images.tensor().gather_rows(&rows))
                    .into_data(),
            );
        }
        let codes = Tensor::new(vec![images.len(), self.latent_dim()], codes);
        self.decoder.calibrate(&codes, chunk);
        self.sample_disc.calibrate(images.tensor(), chunk);
        self.latent_disc.set_eval(true);
        Ok(())
    }

    /// Whether the networks use stored normalisation statistics.
    pub fn is_eval(&self) -> bool {
        self.encoder.is_eval()
    }

    /// Switches every network between batch and stored statistics.
    pub fn set_eval(&mut self, eval: bool) {
        for net in [
            &mut self.encoder,
            &mut self.decoder,
            &mut self.latent_disc,
            &mut self.sample_disc,
        ] {
            net.set_eval(eval);
        }
    }

    /// Re-checks network shapes against the configuration (used after loading).
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let input = self.input_shape().to_vec();
        let d = self.latent_dim();
        let expect = [
            ("encoder", &self.encoder, input.clone(), vec![d]),
            ("decoder", &self.decoder, vec![d], input.clone()),
            ("latent discriminator", &self.latent_disc, vec![d], vec![1]),
            ("sample discriminator", &self.sample_disc, input, vec![1]),
        ];
        for (name, net, inp, out) in expect {
            net.validate()
                .map_err(|e| config_err(format!("{name}: {e}")))?;
            if net.input_shape() != inp.as_slice() || net.output_shape() != out {
                return Err(config_err(format!(
                    "{name} maps {:?} -> {:?}, expected {inp:?} -> {out:?}",
                    net.input_shape(),
                    net.output_shape()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(config_err(format!(
                "sigma must lie in [0, 1], got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lenet() -> NcaeModel {
        NcaeModel::new(
            ModelConfig::default(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
    }

    fn random_images(b: usize, rng: &mut ChaCha8Rng) -> ImageBatch {
        ImageBatch::new(
            [b, 1, 28, 28],
            (0..b * 784).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn encode_and_decode_shapes() {
        let model = lenet();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = model.encode(&random_images(128, &mut rng)).unwrap();
        assert_eq!(z.tensor().shape(), &[128, 32]);
        let lat = LatentBatch::new(
            13,
            32,
            (0..13 * 32).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let x = model.decode(&lat).unwrap();
        assert_eq!(x.tensor().shape(), &[13, 1, 28, 28]);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalised_lenet_scores_rows_independently_after_calibration() {
        let cfg = ModelConfig {
            architecture: Architecture::LeNet {
                channels: [4, 2],
                kernel: 3,
                batch_norm: true,
            },
            latent_dim: 6,
            ..ModelConfig::default()
        };
        let mut model = NcaeModel::<f32>::new(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_images(12, &mut rng);
        let alone = |m: &NcaeModel| m.encode(&batch.select(&[3])).unwrap().row(0).to_vec();
        // batch statistics make a sample's code depend on its batch mates
        assert_ne!(alone(&model), model.encode(&batch).unwrap().row(3));
        model.calibrate(&batch, 5).unwrap();
        assert!(model.is_eval());
        assert_eq!(alone(&model), model.encode(&batch).unwrap().row(3));
        let x = model.reconstruct(&batch).unwrap();
        assert!(x.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        model.validate().unwrap();
    }

    #[test]
    fn duplicated_inputs_give_identical_rows() {
        let model = lenet();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = random_images(1, &mut rng);
        let two = ImageBatch::new([2, 1, 28, 28], [one.data(), one.data()].concat()).unwrap();
        let z = model.encode(&two).unwrap();
        assert_eq!(z.row(0), z.row(1));
        let p = model.discriminate_sample(&two).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn zero_images_encode_to_finite_latents() {
        let model = lenet();
        let zeros = ImageBatch::new([4, 1, 28, 28], vec![0.0; 4 * 784]).unwrap();
        assert!(model.encode(&zeros).unwrap().tensor().is_finite());
    }

    #[test]
    fn shape_mismatches_are_configuration_errors() {
        let model = lenet();
        let small = ImageBatch::new([1, 1, 14, 14], vec![0.0; 196]).unwrap();
        assert!(matches!(
            model.encode(&small),
            Err(crate::NcaeError::Config(_))
        ));
        let lat = LatentBatch::new(1, 8, vec![0.0; 8]).unwrap();
        assert!(matches!(
            model.decode(&lat),
            Err(crate::NcaeError::Config(_))
        ));
    }

    #[test]
    fn discriminator_outputs_are_probabilities_and_permute_with_rows() {
        let model = lenet();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat: LatentBatch =
            LatentBatch::new(5, 32, (0..160).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let p = model.discriminate_latent(&lat).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        let perm = [3, 0, 4, 1, 2];
        let q = model.discriminate_latent(&lat.select(&perm)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(q[k], p[i]);
        }
        let s = model
            .discriminate_sample(&random_images(6, &mut rng))
            .unwrap();
        assert!(s.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        assert!(s.iter().any(|v| *v != s[0]));
    }

    #[test]
    fn center_update_examples() {
        let c = LatentCenter {
            mu: vec![1.0, 1.0],
            gamma: 0.3,
            step: 0,
        };
        let z = LatentBatch::<f64>::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(c.update(&z).unwrap().mu, vec![1.0, 1.0]);

        let c = LatentCenter {
            mu: vec![0.0],
            gamma: 0.5,
            step: 4,
        };
        let next = c
            .update(&LatentBatch::<f64>::new(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(next.mu, vec![0.5]);
        assert_eq!(next.step, 5);

        let c = LatentCenter {
            mu: vec![2.0, 0.0],
            gamma: 0.1,
            step: 0,
        };
        let z = LatentBatch::<f64>::new(2, 2, vec![0.0, 0.0, 4.0, 0.0]).unwrap();
        assert_eq!(c.update(&z).unwrap().mu, vec![2.0, 0.0]);
    }

    #[test]
    fn center_update_rejects_empty_batch() {
        let c = LatentCenter {
            mu: vec![0.0],
            gamma: 0.5,
            step: 0,
        };
        let empty = LatentBatch::<f64>::new(0, 1, vec![]).unwrap();
        assert!(matches!(
            c.update(&empty),
            Err(crate::NcaeError::Argument(_))
        ));
    }

    #[test]
    fn center_initialises_to_exact_mean() {
        let z = LatentBatch::<f64>::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let c = LatentCenter::from_latents(&z, 0.01).unwrap();
        assert_eq!(c.mu, vec![3.0, 5.0]);
        assert_eq!(c.step, 0);
    }

    #[test]
    fn noise_rejects_non_positive_scale_and_collapses_at_tiny_scale() {
        let c = LatentCenter {
            mu: vec![0.25, -1.5],
            gamma: 0.1,
            step: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(sample_noise::<f32, _>(&c, 0.0, 3, &mut rng).is_err());
        assert!(sample_noise::<f32, _>(&c, -1.0, 3, &mut rng).is_err());
        let z: LatentBatch<f32> = sample_noise(&c, 1e-40, 4, &mut rng).unwrap();
        for i in 0..4 {
            assert_eq!(z.row(i), &[0.25f32, -1.5]);
        }
    }

    #[test]
    fn noise_is_reproducible_for_a_seed() {
        let c = LatentCenter {
            mu: vec![0.0; 3],
            gamma: 0.1,
            step: 0,
        };
        let a: LatentBatch<f32> =
            sample_noise(&c, 0.1, 8, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b: LatentBatch<f32> =
            sample_noise(&c, 0.1, 8, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mlp_architecture_round_trips_shapes() {
        let cfg = ModelConfig {
            architecture: Architecture::Mlp {
                input_dim: 2,
                hidden: vec![8],
            },
            latent_dim: 2,
            ..ModelConfig::default()
        };
        let model: NcaeModel<f64> =
            NcaeModel::new(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = ImageBatch::new([3, 1, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let xr = model.reconstruct(&x).unwrap();
        assert_eq!(xr.tensor().shape(), &[3, 1, 1, 2]);
        model.validate().unwrap();
    }
}
