use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::Cache;
use super::{Layer, Scalar, Tensor};

/// A feed-forward stack of [`Layer`]s with a fixed per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    /// Normalisation layers use stored statistics instead of batch ones.
    #[serde(default)]
    eval: bool,
}

/// Intermediate state recorded by [`Network::forward_trace`].
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

/// Parameter gradients laid out like [`Network::params`].
pub type Gradients<T> = Vec<Vec<T>>;

impl<T: Scalar> Network<T> {
    /// Builds the network, checking that every layer accepts its predecessor's output.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self, String> {
        let mut shape = input_shape.clone();
        for (i, l) in layers.iter().enumerate() {
            shape = l
                .output_shape(&shape)
                .map_err(|e| format!("layer {i}: {e}"))?;
        }
        Ok(Network {
            input_shape,
            layers,
            eval: false,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Re-runs shape validation, e.g. after deserialising.
    pub fn validate(&self) -> Result<(), String> {
        Network::new(self.input_shape.clone(), self.layers.clone()).map(|_| ())?;
        for (i, l) in self.layers.iter().enumerate() {
            let ok = match l {
                Layer::Dense {
                    inputs,
                    outputs,
                    weight,
                    bias,
                } => weight.len() == inputs * outputs && bias.len() == *outputs,
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    weight,
                    bias,
                    ..
                }
                | Layer::ConvTranspose2d {
                    in_channels,
                    out_channels,
                    kernel,
                    weight,
                    bias,
                    ..
                } => {
                    weight.len() == in_channels * out_channels * kernel * kernel
                        && bias.len() == *out_channels
                }
                Layer::BatchNorm {
                    channels,
                    mean,
                    var,
                    ..
                } => {
                    mean.len() == *channels
                        && var.len() == *channels
                        && var.iter().all(|v| *v >= 0.0)
                }
                _ => true,
            };
            if !ok {
                return Err(format!(
                    "layer {i}: parameter length does not match its dimensions"
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) {
        assert_eq!(
            &x.shape()[1..],
            self.input_shape.as_slice(),
            "network input shape mismatch"
        );
    }

    pub fn is_eval(&self) -> bool {
        self.eval
    }

    /// Switches normalisation layers between batch and stored statistics.
    pub fn set_eval(&mut self, eval: bool) {
        self.eval = eval;
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.check_input(x);
        self.forward_range(x, self.layers.len(), !self.eval)
    }

    fn forward_range(&self, x: &Tensor<T>, end: usize, train: bool) -> Tensor<T> {
        let mut cur = x.clone();
        for l in &self.layers[..end] {
            cur = l.forward(&cur, false, train).0;
        }
        cur
    }

    /// Sets the stored statistics of every normalisation layer to the exact
    /// population statistics of `x`, processed in chunks of `chunk` rows, and
    /// switches to eval mode. Layers are fitted in order, so each one sees
    /// inputs normalised by the already fitted layers before it.
    pub fn calibrate(&mut self, x: &Tensor<T>, chunk: usize) {
        self.check_input(x);
        let n = x.batch();
        let chunk = chunk.max(1);
        for k in 0..self.layers.len() {
            let Layer::BatchNorm { channels, .. } = self.layers[k] else {
                continue;
            };
            let (mut sum, mut sq, mut count) = (vec![0.0; channels], vec![0.0; channels], 0.0);
            for start in (0..n).step_by(chunk) {
                let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
                let h = self.forward_range(&x.gather_rows(&rows), k, false);
                let p = h.row_len() / channels;
                for (i, &v) in h.data().iter().enumerate() {
                    let ch = (i / p) % channels;
                    sum[ch] += v.f64();
                    sq[ch] += v.f64() * v.f64();
                }
                count += (h.batch() * p) as f64;
            }
            if let Layer::BatchNorm { mean, var, .. } = &mut self.layers[k] {
                for ch in 0..channels {
                    mean[ch] = sum[ch] / count;
                    var[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
                }
            }
        }
        self.eval = true;
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> (Tensor<T>, Trace<T>) {
        self.check_input(x);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward(&cur, true, !self.eval);
            caches.push(c);
            cur = y;
        }
        (cur, Trace { caches })
    }

    /// Backpropagates `grad_out` through a recorded trace and returns the
    /// gradient w.r.t. the network input. Parameter gradients are added to
    /// `grads` when provided; pass `None` to treat the network as frozen.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: &Tensor<T>,
        mut grads: Option<&mut Gradients<T>>,
    ) -> Tensor<T> {
        let mut g = grad_out.clone();
        let mut offset = self.param_count_tensors();
        for (l, c) in self.layers.iter().zip(&trace.caches).rev() {
            let n = l.params().len();
            offset -= n;
            let slot = grads.as_deref_mut().map(|gs| &mut gs[offset..offset + n]);
            g = l.backward(c, &g, slot);
        }
        g
    }

    fn param_count_tensors(&self) -> usize {
        self.layers.iter().map(|l| l.params().len()).sum()
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        self.params()
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over the raw parameter bits and stored normalisation statistics.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p {
                h.update(v.f64().to_bits().to_le_bytes());
            }
        }
        for l in &self.layers {
            if let Layer::BatchNorm { mean, var, .. } = l {
                for v in mean.iter().chain(var) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}
