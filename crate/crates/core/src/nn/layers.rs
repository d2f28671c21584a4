use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

/// One stage of a feed-forward network. Parameterised variants own their
/// weights in PyTorch layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", bound = "T: Scalar")]
pub enum Layer<T> {
    /// `y = x·Wᵀ + b`, weight `[outputs, inputs]`. Flattens everything but the batch axis.
    Dense {
        inputs: usize,
        outputs: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    },
    /// Stride-1 convolution, weight `[out, in, k, k]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    },
    /// Transposed convolution, weight `[in, out, k, k]`.
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    },
    /// Non-overlapping max pooling (window = stride = `size`).
    MaxPool2d {
        size: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    /// Reinterpret each row with the given per-sample shape.
    Reshape {
        shape: Vec<usize>,
    },
    /// Per-channel normalisation over the batch and spatial axes, without
    /// affine parameters. Training passes use batch statistics; otherwise the
    /// stored population `mean` and `var` are used.
    BatchNorm {
        channels: usize,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

pub(crate) enum Cache<T> {
    Empty,
    Input(Tensor<T>),
    Cols {
        cols: Vec<T>,
        in_shape: Vec<usize>,
    },
    Pool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Output(Tensor<T>),
    Shape(Vec<usize>),
    Norm {
        xhat: Tensor<T>,
        inv_std: Vec<f64>,
        batch: bool,
    },
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect()
}

impl<T: Scalar> Layer<T> {
    pub fn dense<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Layer::Dense {
            inputs,
            outputs,
            weight: uniform(rng, inputs * outputs, bound),
            bias: uniform(rng, outputs, bound),
        }
    }

    pub fn conv2d<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: uniform(rng, out_channels * in_channels * kernel * kernel, bound),
            bias: uniform(rng, out_channels, bound),
        }
    }

    pub fn conv_transpose2d<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Self {
        // PyTorch computes fan-in from weight dim 1 for transposed convs.
        let bound = 1.0 / ((out_channels * kernel * kernel) as f64).sqrt();
        Layer::ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight: uniform(rng, in_channels * out_channels * kernel * kernel, bound),
            bias: uniform(rng, out_channels, bound),
        }
    }

    pub fn batch_norm(channels: usize, eps: f64) -> Self {
        Layer::BatchNorm {
            channels,
            eps,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        let spatial = |c: usize| -> Result<(usize, usize), String> {
            match input {
                [ch, h, w] if *ch == c => Ok((*h, *w)),
                _ => Err(format!("expected [{c}, h, w], got {input:?}")),
            }
        };
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                let n: usize = input.iter().product();
                if n != *inputs {
                    return Err(format!("dense expects {inputs} features, got {input:?}"));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
                ..
            } => {
                let (h, w) = spatial(*in_channels)?;
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(format!("conv kernel {kernel} larger than input {input:?}"));
                }
                Ok(vec![
                    *out_channels,
                    h + 2 * padding - kernel + 1,
                    w + 2 * padding - kernel + 1,
                ])
            }
            Layer::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
                ..
            } => {
                let (h, w) = spatial(*in_channels)?;
                let grow = |n: usize| (n - 1) * stride + kernel + output_padding;
                if grow(h) < 2 * padding || grow(w) < 2 * padding {
                    return Err(format!("transposed conv padding too large for {input:?}"));
                }
                Ok(vec![
                    *out_channels,
                    grow(h) - 2 * padding,
                    grow(w) - 2 * padding,
                ])
            }
            Layer::MaxPool2d { size } => match input {
                [c, h, w] if *h >= *size && *w >= *size => Ok(vec![*c, h / size, w / size]),
                _ => Err(format!("cannot pool {input:?} by {size}")),
            },
            Layer::LeakyRelu { .. } | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::BatchNorm { channels, .. } => match input.first() {
                Some(c) if c == channels => Ok(input.to_vec()),
                _ => Err(format!("batch norm over {channels} channels got {input:?}")),
            },
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(format!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }

    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Dense { weight, bias, .. }
            | Layer::Conv2d { weight, bias, .. }
            | Layer::ConvTranspose2d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Dense { weight, bias, .. }
            | Layer::Conv2d { weight, bias, .. }
            | Layer::ConvTranspose2d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    /// Forward pass. `train` selects batch statistics in normalisation layers.
    pub(crate) fn forward(&self, x: &Tensor<T>, keep: bool, train: bool) -> (Tensor<T>, Cache<T>) {
        let b = x.batch();
        match self {
            Layer::Dense {
                inputs,
                outputs,
                weight,
                bias,
            } => {
                let mut y = vec![T::zero(); b * outputs];
                for row in y.chunks_mut(*outputs) {
                    row.copy_from_slice(bias);
                }
                T::gemm(
                    b,
                    *inputs,
                    *outputs,
                    x.data(),
                    false,
                    weight,
                    true,
                    T::one(),
                    &mut y,
                );
                let cache = if keep {
                    Cache::Input(x.clone())
                } else {
                    Cache::Empty
                };
                (Tensor::new(vec![b, *outputs], y), cache)
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
                weight,
                bias,
            } => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h + 2 * padding - kernel + 1, w + 2 * padding - kernel + 1);
                let ckk = in_channels * kernel * kernel;
                let p = oh * ow;
                let mut cols = vec![T::zero(); b * ckk * p];
                let mut y = vec![T::zero(); b * out_channels * p];
                for (i, (yc, cc)) in y
                    .chunks_mut(out_channels * p)
                    .zip(cols.chunks_mut(ckk * p))
                    .enumerate()
                {
                    im2col(
                        x.row(i),
                        *in_channels,
                        h,
                        w,
                        *kernel,
                        1,
                        *padding,
                        oh,
                        ow,
                        cc,
                    );
                    for (oc, plane) in yc.chunks_mut(p).enumerate() {
                        plane.fill(bias[oc]);
                    }
                    T::gemm(
                        *out_channels,
                        ckk,
                        p,
                        weight,
                        false,
                        cc,
                        false,
                        T::one(),
                        yc,
                    );
                }
                let cache = if keep {
                    Cache::Cols {
                        cols,
                        in_shape: x.shape().to_vec(),
                    }
                } else {
                    Cache::Empty
                };
                (Tensor::new(vec![b, *out_channels, oh, ow], y), cache)
            }
            Layer::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
                ..
            } => {
                let (ih, iw) = (x.shape()[2], x.shape()[3]);
                let out = self
                    .output_shape(&x.shape()[1..])
                    .expect("shape validated at network construction");
                let (oh, ow) = (out[1], out[2]);
                let okk = out_channels * kernel * kernel;
                let p = ih * iw;
                let mut cols = vec![T::zero(); okk * p];
                let mut y = vec![T::zero(); b * out_channels * oh * ow];
                for (i, yc) in y.chunks_mut(out_channels * oh * ow).enumerate() {
                    T::gemm(
                        okk,
                        *in_channels,
                        p,
                        weight,
                        true,
                        x.row(i),
                        false,
                        T::zero(),
                        &mut cols,
                    );
                    for (oc, plane) in yc.chunks_mut(oh * ow).enumerate() {
                        plane.fill(bias[oc]);
                    }
                    col2im(
                        &cols,
                        *out_channels,
                        oh,
                        ow,
                        *kernel,
                        *stride,
                        *padding,
                        ih,
                        iw,
                        yc,
                    );
                }
                let cache = if keep {
                    Cache::Input(x.clone())
                } else {
                    Cache::Empty
                };
                (Tensor::new(vec![b, *out_channels, oh, ow], y), cache)
            }
            Layer::MaxPool2d { size } => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h / size, w / size);
                let mut y = Vec::with_capacity(b * c * oh * ow);
                let mut argmax = Vec::with_capacity(if keep { b * c * oh * ow } else { 0 });
                let data = x.data();
                for plane in 0..b * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * size * w + ox * size;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let idx = base + (oy * size + dy) * w + ox * size + dx;
                                    if data[idx] > data[best] {
                                        best = idx;
                                    }
                                }
                            }
                            y.push(data[best]);
                            if keep {
                                argmax.push(best);
                            }
                        }
                    }
                }
                let cache = if keep {
                    Cache::Pool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    }
                } else {
                    Cache::Empty
                };
                (Tensor::new(vec![b, c, oh, ow], y), cache)
            }
            Layer::LeakyRelu { slope } => {
                let s = T::of(*slope);
                let y = x
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * s })
                    .collect();
                let cache = if keep {
                    Cache::Input(x.clone())
                } else {
                    Cache::Empty
                };
                (Tensor::new(x.shape().to_vec(), y), cache)
            }
            Layer::Sigmoid => {
                let y = Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| sigmoid(v)).collect(),
                );
                let cache = if keep {
                    Cache::Output(y.clone())
                } else {
                    Cache::Empty
                };
                (y, cache)
            }
            Layer::Reshape { shape } => {
                let mut full = vec![b];
                full.extend_from_slice(shape);
                (x.clone().reshape(full), Cache::Shape(x.shape().to_vec()))
            }
            Layer::BatchNorm {
                channels,
                eps,
                mean,
                var,
            } => {
                let c = *channels;
                let (mean, var) = if train {
                    channel_stats(x, c)
                } else {
                    (mean.clone(), var.clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let p = x.row_len() / c;
                let y: Vec<T> = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / p) % c;
                        T::of((v.f64() - mean[ch]) * inv_std[ch])
                    })
                    .collect();
                let y = Tensor::new(x.shape().to_vec(), y);
                let cache = if keep {
                    Cache::Norm {
                        xhat: y.clone(),
                        inv_std,
                        batch: train,
                    }
                } else {
                    Cache::Empty
                };
                (y, cache)
            }
        }
    }

    /// Gradient w.r.t. the layer input. When `grads` is given, parameter
    /// gradients are accumulated into it as `[weight, bias]`.
    pub(crate) fn backward(
        &self,
        cache: &Cache<T>,
        gy: &Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
    ) -> Tensor<T> {
        let b = gy.batch();
        match (self, cache) {
            (
                Layer::Dense {
                    inputs,
                    outputs,
                    weight,
                    ..
                },
                Cache::Input(x),
            ) => {
                if let Some(g) = grads {
                    let (gw, rest) = g.split_at_mut(1);
                    T::gemm(
                        *outputs,
                        b,
                        *inputs,
                        gy.data(),
                        true,
                        x.data(),
                        false,
                        T::one(),
                        &mut gw[0],
                    );
                    for row in gy.data().chunks(*outputs) {
                        for (acc, &v) in rest[0].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                let mut gx = vec![T::zero(); b * inputs];
                T::gemm(
                    b,
                    *outputs,
                    *inputs,
                    gy.data(),
                    false,
                    weight,
                    false,
                    T::zero(),
                    &mut gx,
                );
                Tensor::new(x.shape().to_vec(), gx)
            }
            (
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    weight,
                    ..
                },
                Cache::Cols { cols, in_shape },
            ) => {
                let (h, w) = (in_shape[2], in_shape[3]);
                let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
                let ckk = in_channels * kernel * kernel;
                let p = oh * ow;
                let mut gx = vec![T::zero(); b * in_channels * h * w];
                let mut gcols = vec![T::zero(); ckk * p];
                let mut grads = grads;
                for i in 0..b {
                    let gyi = gy.row(i);
                    let ci = &cols[i * ckk * p..(i + 1) * ckk * p];
                    if let Some(g) = grads.as_deref_mut() {
                        T::gemm(
                            *out_channels,
                            p,
                            ckk,
                            gyi,
                            false,
                            ci,
                            true,
                            T::one(),
                            &mut g[0],
                        );
                        for (oc, plane) in gyi.chunks(p).enumerate() {
                            g[1][oc] += plane.iter().copied().sum::<T>();
                        }
                    }
                    T::gemm(
                        ckk,
                        *out_channels,
                        p,
                        weight,
                        true,
                        gyi,
                        false,
                        T::zero(),
                        &mut gcols,
                    );
                    let gxi = &mut gx[i * in_channels * h * w..(i + 1) * in_channels * h * w];
                    col2im(
                        &gcols,
                        *in_channels,
                        h,
                        w,
                        *kernel,
                        1,
                        *padding,
                        oh,
                        ow,
                        gxi,
                    );
                }
                Tensor::new(in_shape.clone(), gx)
            }
            (
                Layer::ConvTranspose2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    ..
                },
                Cache::Input(x),
            ) => {
                let (ih, iw) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
                let okk = out_channels * kernel * kernel;
                let p = ih * iw;
                let mut gcols = vec![T::zero(); okk * p];
                let mut gx = vec![T::zero(); b * in_channels * p];
                let mut grads = grads;
                for i in 0..b {
                    let gyi = gy.row(i);
                    im2col(
                        gyi,
                        *out_channels,
                        oh,
                        ow,
                        *kernel,
                        *stride,
                        *padding,
                        ih,
                        iw,
                        &mut gcols,
                    );
                    let gxi = &mut gx[i * in_channels * p..(i + 1) * in_channels * p];
                    T::gemm(
                        *in_channels,
                        okk,
                        p,
                        weight,
                        false,
                        &gcols,
                        false,
                        T::zero(),
                        gxi,
                    );
                    if let Some(g) = grads.as_deref_mut() {
                        T::gemm(
                            *in_channels,
                            p,
                            okk,
                            x.row(i),
                            false,
                            &gcols,
                            true,
                            T::one(),
                            &mut g[0],
                        );
                        for (oc, plane) in gyi.chunks(oh * ow).enumerate() {
                            g[1][oc] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), gx)
            }
            (Layer::MaxPool2d { .. }, Cache::Pool { argmax, in_shape }) => {
                let mut gx = Tensor::zeros(in_shape.clone());
                let d = gx.data_mut();
                for (&idx, &g) in argmax.iter().zip(gy.data()) {
                    d[idx] += g;
                }
                gx
            }
            (Layer::LeakyRelu { slope }, Cache::Input(x)) => {
                let s = T::of(*slope);
                let g = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * s })
                    .collect();
                Tensor::new(x.shape().to_vec(), g)
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let g = y
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                Tensor::new(y.shape().to_vec(), g)
            }
            (Layer::Reshape { .. }, Cache::Shape(s)) => gy.clone().reshape(s.clone()),
            (
                Layer::BatchNorm { channels, .. },
                Cache::Norm {
                    xhat,
                    inv_std,
                    batch,
                },
            ) => {
                let c = *channels;
                let p = gy.row_len() / c;
                let ch_of = |i: usize| (i / p) % c;
                let mut gx: Vec<T> = Vec::with_capacity(gy.data().len());
                if *batch {
                    let n = (b * p) as f64;
                    let mut mg = vec![0.0; c];
                    let mut mgx = vec![0.0; c];
                    for (i, (&g, &xh)) in gy.data().iter().zip(xhat.data()).enumerate() {
                        mg[ch_of(i)] += g.f64() / n;
                        mgx[ch_of(i)] += g.f64() * xh.f64() / n;
                    }
                    for (i, (&g, &xh)) in gy.data().iter().zip(xhat.data()).enumerate() {
                        let ch = ch_of(i);
                        gx.push(T::of(inv_std[ch] * (g.f64() - mg[ch] - xh.f64() * mgx[ch])));
                    }
                } else {
                    gx.extend(
                        gy.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| T::of(g.f64() * inv_std[ch_of(i)])),
                    );
                }
                Tensor::new(gy.shape().to_vec(), gx)
            }
            _ => panic!("backward called without a matching forward cache"),
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub(crate) fn channel_stats<T: Scalar>(x: &Tensor<T>, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let p = x.row_len() / channels;
    let n = (x.batch() * p) as f64;
    let mut mean = vec![0.0; channels];
    for (i, &v) in x.data().iter().enumerate() {
        mean[(i / p) % channels] += v.f64();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = (i / p) % channels;
        var[ch] += (v.f64() - mean[ch]).powi(2);
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Unfold `x` (`c×h×w`) into `cols` of shape `[c·k·k, oh·ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..][..w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ci * h * w + iy as usize * w..][..w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
