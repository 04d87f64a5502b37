use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Square-kernel convolution with "same" padding (`kernel / 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(out, in, k, k)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `(out, in)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Normalises over every axis except the channel axis (axis 1), so it
/// serves both `(N, C, H, W)` and `(N, F)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Folds one batch's statistics into the running estimates, using the
    /// unbiased variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divisor `count`) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    BatchNorm(BatchNorm),
    MaxPool2,
    Upsample2,
    Dropout {
        p: f64,
    },
    Flatten,
    Dense(Dense),
    /// Softmax across the channel axis at every pixel.
    Softmax,
    /// Identity activation on a regression head.
    Linear,
}

/// What a train-mode forward keeps for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    Norm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        stats: BatchStats,
    },
    Argmax {
        input_shape: Vec<usize>,
        index: Vec<usize>,
    },
    Shape(Vec<usize>),
    Mask(Vec<f64>),
    None,
}

/// Gradients of a layer's trainable parameters, in the same layout as the
/// parameters (weight/bias, or gamma/beta for batch norm).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn shape_err(context: &'static str, expected: Vec<usize>, actual: &[usize]) -> Error {
    Error::Shape {
        context,
        expected,
        actual: actual.to_vec(),
    }
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::MaxPool2 => "maxpool2",
            Layer::Upsample2 => "upsample2",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
            Layer::Linear => "linear",
        }
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            Layer::BatchNorm(b) => Some((&b.gamma, &b.beta)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            Layer::BatchNorm(b) => Some((&mut b.gamma, &mut b.beta)),
            _ => None,
        }
    }

    /// Runs the layer. In train mode the returned cache feeds [`Layer::backward`];
    /// dropout draws its mask from `rng`.
    pub fn forward(&self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Cache)> {
        let train = mode == Mode::Train;
        match self {
            Layer::Conv2d(c) => {
                let y = conv_forward(c, &x)?;
                Ok((y, if train { Cache::Input(x) } else { Cache::None }))
            }
            Layer::Relu => {
                let mut y = x;
                for v in y.data_mut() {
                    *v = v.max(0.0);
                }
                let cache = if train { Cache::Output(y.clone()) } else { Cache::None };
                Ok((y, cache))
            }
            Layer::BatchNorm(b) => bn_forward(b, x, train),
            Layer::MaxPool2 => pool_forward(&x, train),
            Layer::Upsample2 => {
                let (n, c, h, w) = x.dims4("upsample2 input")?;
                let mut y = vec![0.0; n * c * h * w * 4];
                let src = x.data();
                for plane in 0..n * c {
                    for r in 0..2 * h {
                        let row = &src[plane * h * w + (r / 2) * w..][..w];
                        let dst = &mut y[(plane * 2 * h + r) * 2 * w..][..2 * w];
                        for (i, v) in row.iter().enumerate() {
                            dst[2 * i] = *v;
                            dst[2 * i + 1] = *v;
                        }
                    }
                }
                let cache = if train {
                    Cache::Shape(x.shape().to_vec())
                } else {
                    Cache::None
                };
                Ok((Tensor::from_parts(vec![n, c, 2 * h, 2 * w], y), cache))
            }
            Layer::Dropout { p } => {
                if !train || *p == 0.0 {
                    let len = x.len();
                    let cache = if train {
                        Cache::Mask(vec![1.0; len])
                    } else {
                        Cache::None
                    };
                    return Ok((x, cache));
                }
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                    .collect();
                let mut y = x;
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Ok((y, Cache::Mask(mask)))
            }
            Layer::Flatten => {
                if x.shape().len() < 2 {
                    return Err(shape_err("flatten input", vec![0, 0], x.shape()));
                }
                let shape = x.shape().to_vec();
                let n = shape[0];
                let f = x.len() / n.max(1);
                let cache = if train { Cache::Shape(shape) } else { Cache::None };
                Ok((x.reshaped(vec![n, f]), cache))
            }
            Layer::Dense(d) => {
                let (n, f) = x.dims2("dense input")?;
                if f != d.inputs {
                    return Err(shape_err("dense input", vec![n, d.inputs], x.shape()));
                }
                let mut y = vec![0.0; n * d.outputs];
                gemm(n, d.inputs, d.outputs, x.data(), false, &d.weight, true, 0.0, &mut y);
                for row in y.chunks_mut(d.outputs) {
                    for (v, b) in row.iter_mut().zip(&d.bias) {
                        *v += b;
                    }
                }
                let y = Tensor::from_parts(vec![n, d.outputs], y);
                Ok((y, if train { Cache::Input(x) } else { Cache::None }))
            }
            Layer::Softmax => {
                let (n, c, h, w) = x.dims4("softmax input")?;
                let hw = h * w;
                let mut y = x;
                let data = y.data_mut();
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let max = (0..c)
                            .map(|k| data[base + k * hw + p])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for k in 0..c {
                            let e = (data[base + k * hw + p] - max).exp();
                            data[base + k * hw + p] = e;
                            sum += e;
                        }
                        for k in 0..c {
                            data[base + k * hw + p] /= sum;
                        }
                    }
                }
                let cache = if train { Cache::Output(y.clone()) } else { Cache::None };
                Ok((y, cache))
            }
            Layer::Linear => Ok((x, Cache::None)),
        }
    }

    /// Given `dL/dy`, returns `dL/dx` and the parameter gradients.
    pub fn backward(&self, cache: &Cache, grad: Tensor) -> Result<(Tensor, Option<ParamGrad>)> {
        match (self, cache) {
            (Layer::Conv2d(c), Cache::Input(x)) => {
                let (gx, pg) = conv_backward(c, x, &grad)?;
                Ok((gx, Some(pg)))
            }
            (Layer::Relu, Cache::Output(y)) => {
                check_same(y, &grad)?;
                let mut g = grad;
                for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok((g, None))
            }
            (Layer::BatchNorm(b), Cache::Norm { xhat, inv_std, .. }) => {
                check_same(xhat, &grad)?;
                let (gx, pg) = bn_backward(b, xhat, inv_std, &grad);
                Ok((gx, Some(pg)))
            }
            (Layer::MaxPool2, Cache::Argmax { input_shape, index }) => {
                if grad.len() != index.len() {
                    return Err(shape_err("maxpool2 gradient", vec![index.len()], grad.shape()));
                }
                let mut gx = vec![0.0; input_shape.iter().product()];
                for (g, &i) in grad.data().iter().zip(index) {
                    gx[i] += g;
                }
                Ok((Tensor::from_parts(input_shape.clone(), gx), None))
            }
            (Layer::Upsample2, Cache::Shape(shape)) => {
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                if grad.shape() != [n, c, 2 * h, 2 * w] {
                    return Err(shape_err("upsample2 gradient", vec![n, c, 2 * h, 2 * w], grad.shape()));
                }
                let mut gx = vec![0.0; n * c * h * w];
                let g = grad.data();
                for plane in 0..n * c {
                    for r in 0..2 * h {
                        let row = &g[(plane * 2 * h + r) * 2 * w..][..2 * w];
                        let dst = &mut gx[plane * h * w + (r / 2) * w..][..w];
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d += row[2 * i] + row[2 * i + 1];
                        }
                    }
                }
                Ok((Tensor::from_parts(shape.clone(), gx), None))
            }
            (Layer::Dropout { .. }, Cache::Mask(mask)) => {
                if grad.len() != mask.len() {
                    return Err(shape_err("dropout gradient", vec![mask.len()], grad.shape()));
                }
                let mut g = grad;
                for (v, m) in g.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                Ok((g, None))
            }
            (Layer::Flatten, Cache::Shape(shape)) => {
                if grad.len() != shape.iter().product::<usize>() {
                    return Err(shape_err("flatten gradient", shape.clone(), grad.shape()));
                }
                Ok((grad.reshaped(shape.clone()), None))
            }
            (Layer::Dense(d), Cache::Input(x)) => {
                let (n, _) = x.dims2("dense input")?;
                if grad.shape() != [n, d.outputs] {
                    return Err(shape_err("dense gradient", vec![n, d.outputs], grad.shape()));
                }
                let mut gw = vec![0.0; d.outputs * d.inputs];
                gemm(d.outputs, n, d.inputs, grad.data(), true, x.data(), false, 0.0, &mut gw);
                let mut gb = vec![0.0; d.outputs];
                for row in grad.data().chunks(d.outputs) {
                    for (b, g) in gb.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let mut gx = vec![0.0; n * d.inputs];
                gemm(
                    n,
                    d.outputs,
                    d.inputs,
                    grad.data(),
                    false,
                    &d.weight,
                    false,
                    0.0,
                    &mut gx,
                );
                Ok((
                    Tensor::from_parts(vec![n, d.inputs], gx),
                    Some(ParamGrad { weight: gw, bias: gb }),
                ))
            }
            (Layer::Softmax, Cache::Output(y)) => {
                check_same(y, &grad)?;
                let (n, c, h, w) = y.dims4("softmax output")?;
                let hw = h * w;
                let (yd, gd) = (y.data(), grad.data());
                let mut gx = vec![0.0; y.len()];
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|k| yd[base + k * hw + p] * gd[base + k * hw + p]).sum();
                        for k in 0..c {
                            let i = base + k * hw + p;
                            gx[i] = yd[i] * (gd[i] - dot);
                        }
                    }
                }
                Ok((Tensor::from_parts(y.shape().to_vec(), gx), None))
            }
            (Layer::Linear, Cache::None) => Ok((grad, None)),
            _ => Err(Error::MissingCache),
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err("gradient", a.shape().to_vec(), b.shape()));
    }
    Ok(())
}

/// Output positions `o` for which `o * stride + offset` lands in `[0, len)`.
fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let limit = len as isize - offset;
    let hi = if limit <= 0 {
        0
    } else {
        (limit as usize).div_ceil(stride).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Unrolls one sample `(C, H, W)` into `(C*k*k, Ho*Wo)`.
fn im2col(c: &Conv2d, x: &[f64], h: usize, w: usize, ho: usize, wo: usize, col: &mut [f64]) {
    let (k, s, pad) = (c.kernel, c.stride, c.pad() as isize);
    for ci in 0..c.in_channels {
        let plane = &x[ci * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..][..ho * wo];
                let (x0, x1) = valid_range(wo, s, kx as isize - pad, w);
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let out = &mut dst[oy * wo..][..wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let ix0 = (x0 * s) as isize + kx as isize - pad;
                    if s == 1 {
                        let ix0 = ix0 as usize;
                        out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for (j, o) in out[x0..x1].iter_mut().enumerate() {
                            *o = src[ix0 as usize + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `(C, H, W)` sample.
fn col2im(c: &Conv2d, col: &[f64], h: usize, w: usize, ho: usize, wo: usize, x: &mut [f64]) {
    let (k, s, pad) = (c.kernel, c.stride, c.pad() as isize);
    for ci in 0..c.in_channels {
        let plane = &mut x[ci * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..][..ho * wo];
                let (x0, x1) = valid_range(wo, s, kx as isize - pad, w);
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let ix0 = ((x0 * s) as isize + kx as isize - pad) as usize;
                    for (j, v) in src[oy * wo + x0..oy * wo + x1].iter().enumerate() {
                        dst[ix0 + j * s] += v;
                    }
                }
            }
        }
    }
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let (n, ch, h, w) = x.dims4("conv2d input")?;
    if ch != c.in_channels {
        return Err(shape_err("conv2d input", vec![n, c.in_channels, h, w], x.shape()));
    }
    let (ho, wo) = c.out_dims(h, w);
    let kk = c.fan_in();
    let p = ho * wo;
    let mut col = vec![0.0; kk * p];
    let mut y = vec![0.0; n * c.out_channels * p];
    for s in 0..n {
        im2col(c, &x.data()[s * ch * h * w..][..ch * h * w], h, w, ho, wo, &mut col);
        let out = &mut y[s * c.out_channels * p..][..c.out_channels * p];
        for (o, b) in out.chunks_mut(p).zip(&c.bias) {
            o.fill(*b);
        }
        gemm(c.out_channels, kk, p, &c.weight, false, &col, false, 1.0, out);
    }
    Ok(Tensor::from_parts(vec![n, c.out_channels, ho, wo], y))
}

fn conv_backward(c: &Conv2d, x: &Tensor, grad: &Tensor) -> Result<(Tensor, ParamGrad)> {
    let (n, ch, h, w) = x.dims4("conv2d input")?;
    let (ho, wo) = c.out_dims(h, w);
    if grad.shape() != [n, c.out_channels, ho, wo] {
        return Err(shape_err(
            "conv2d gradient",
            vec![n, c.out_channels, ho, wo],
            grad.shape(),
        ));
    }
    let kk = c.fan_in();
    let p = ho * wo;
    let mut col = vec![0.0; kk * p];
    let mut dcol = vec![0.0; kk * p];
    let mut gw = vec![0.0; c.weight.len()];
    let mut gb = vec![0.0; c.out_channels];
    let mut gx = vec![0.0; x.len()];
    for s in 0..n {
        let xs = &x.data()[s * ch * h * w..][..ch * h * w];
        let gs = &grad.data()[s * c.out_channels * p..][..c.out_channels * p];
        im2col(c, xs, h, w, ho, wo, &mut col);
        gemm(c.out_channels, p, kk, gs, false, &col, true, 1.0, &mut gw);
        for (b, row) in gb.iter_mut().zip(gs.chunks(p)) {
            *b += row.iter().sum::<f64>();
        }
        gemm(kk, c.out_channels, p, &c.weight, true, gs, false, 0.0, &mut dcol);
        col2im(c, &dcol, h, w, ho, wo, &mut gx[s * ch * h * w..][..ch * h * w]);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        ParamGrad { weight: gw, bias: gb },
    ))
}

/// `(batch, channels, inner)` view of a 2-D or 4-D tensor.
fn channel_layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    let ok = match shape.len() {
        2 | 4 => shape[1] == channels,
        _ => false,
    };
    if !ok {
        return Err(shape_err("batchnorm input", vec![0, channels], shape));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

fn bn_forward(b: &BatchNorm, x: Tensor, train: bool) -> Result<(Tensor, Cache)> {
    let (n, inner) = channel_layout(&x, b.channels)?;
    let c = b.channels;
    let count = n * inner;
    let mut y = x;
    if !train {
        let data = y.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let scale = b.gamma[ch] / (b.running_var[ch] + b.eps).sqrt();
                let shift = b.beta[ch] - b.running_mean[ch] * scale;
                for v in &mut data[(s * c + ch) * inner..][..inner] {
                    *v = *v * scale + shift;
                }
            }
        }
        return Ok((y, Cache::None));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    {
        let data = y.data();
        for s in 0..n {
            for ch in 0..c {
                mean[ch] += data[(s * c + ch) * inner..][..inner].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for s in 0..n {
            for ch in 0..c {
                var[ch] += data[(s * c + ch) * inner..][..inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + b.eps).sqrt()).collect();
    let data = y.data_mut();
    let mut xhat = vec![0.0; data.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            for i in off..off + inner {
                let h = (data[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                data[i] = b.gamma[ch] * h + b.beta[ch];
            }
        }
    }
    let xhat = Tensor::from_parts(y.shape().to_vec(), xhat);
    Ok((
        y,
        Cache::Norm {
            xhat,
            inv_std,
            stats: BatchStats { mean, var, count },
        },
    ))
}

fn bn_backward(b: &BatchNorm, xhat: &Tensor, inv_std: &[f64], grad: &Tensor) -> (Tensor, ParamGrad) {
    let c = b.channels;
    let n = xhat.shape()[0];
    let inner: usize = xhat.shape()[2..].iter().product();
    let m = (n * inner) as f64;
    let (xh, g) = (xhat.data(), grad.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            for i in off..off + inner {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    // dxhat = g * gamma; sums of dxhat and dxhat*xhat follow from dbeta/dgamma
    let mut gx = vec![0.0; g.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            let k = b.gamma[ch] * inv_std[ch] / m;
            for i in off..off + inner {
                gx[i] = k * (m * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    (
        Tensor::from_parts(xhat.shape().to_vec(), gx),
        ParamGrad {
            weight: dgamma,
            bias: dbeta,
        },
    )
}

fn pool_forward(x: &Tensor, train: bool) -> Result<(Tensor, Cache)> {
    let (n, c, h, w) = x.dims4("maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(
            "maxpool2 input (even extents)",
            vec![n, c, h & !1, w & !1],
            x.shape(),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut y = vec![0.0; n * c * ho * wo];
    let mut index = if train { vec![0usize; y.len()] } else { Vec::new() };
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                y[o] = src[best];
                if train {
                    index[o] = best;
                }
            }
        }
    }
    let cache = if train {
        Cache::Argmax {
            input_shape: x.shape().to_vec(),
            index,
        }
    } else {
        Cache::None
    };
    Ok((Tensor::from_parts(vec![n, c, ho, wo], y), cache))
}
