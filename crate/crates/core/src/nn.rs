//! Layer kernels with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so an
//! instance is single-writer: one forward/backward pair at a time.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Train mode normalizes with batch statistics and updates running estimates;
/// eval mode uses the running estimates only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// A named tensor of learnable weights or a non-learnable buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub learnable: bool,
}

impl Param {
    pub fn learnable(shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            learnable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f64>) -> Self {
        Self {
            shape,
            value,
            grad: Vec::new(),
            learnable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Walks named parameters. Names are `/`-separated paths.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn learnable_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.learnable {
                n += p.len();
            }
        });
        n
    }
}

/// Layers whose output is piecewise linear in their input report the active
/// piece of their last forward pass, so finite-difference checks can tell
/// when a perturbation crossed a kink.
pub trait Piecewise {
    fn hash_pattern(&self, h: &mut dyn Hasher);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<FeatureMap>,
}

impl Conv2d {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let weight: Vec<f64> = (0..out_channels * fan_in)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::learnable(vec![out_channels, in_channels, kernel, kernel], weight),
            bias: bias.then(|| Param::learnable(vec![out_channels], vec![0.0; out_channels])),
            input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(Error::dimension("convolution input", self.kernel, (h, w)));
        }
        Ok((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, sample: &[f64], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &sample[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Convolves `x`; the input is cached for backward only in train mode.
    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let y = self.apply(x)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn apply(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::dimension(
                "convolution channels",
                self.in_channels,
                c,
            ));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let p = oh * ow;
        let kdim = self.col_rows();
        let mut out = FeatureMap::zeros([n, self.out_channels, oh, ow]);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kdim * p]
        };
        let out_len = self.out_channels * p;
        for s in 0..n {
            let b: &[f64] = if self.is_pointwise() {
                x.sample(s)
            } else {
                self.im2col(x.sample(s), h, w, oh, ow, &mut col);
                &col
            };
            let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
            if let Some(bias) = &self.bias {
                for (o, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias.value[o]);
                }
            }
            // out[o, p] = W[o, k] * col[k, p]
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    kdim,
                    p,
                    1.0,
                    self.weight.value.as_ptr(),
                    kdim as isize,
                    1,
                    b.as_ptr(),
                    p as isize,
                    1,
                    if self.bias.is_some() { 1.0 } else { 0.0 },
                    dst.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Usage("convolution backward without forward".into()))?;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w)?;
        grad_out.ensure_shape([n, self.out_channels, oh, ow], "convolution gradient")?;
        let p = oh * ow;
        let kdim = self.col_rows();
        let mut grad_in = FeatureMap::zeros(x.shape());
        let pointwise = self.is_pointwise();
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![0.0; kdim * p]
        };
        let mut dcol = vec![0.0; kdim * p];
        let out_len = self.out_channels * p;
        let in_len = x.sample_len();
        for s in 0..n {
            let dy = &grad_out.data()[s * out_len..(s + 1) * out_len];
            let b: &[f64] = if pointwise {
                x.sample(s)
            } else {
                self.im2col(x.sample(s), h, w, oh, ow, &mut col);
                &col
            };
            // dW[o, k] += dY[o, p] * col[k, p]^T
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    p,
                    kdim,
                    1.0,
                    dy.as_ptr(),
                    p as isize,
                    1,
                    b.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    self.weight.grad.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            if let Some(bias) = &mut self.bias {
                for (o, row) in dy.chunks(p).enumerate() {
                    bias.grad[o] += row.iter().sum::<f64>();
                }
            }
            // dcol[k, p] = W[o, k]^T * dY[o, p]
            let target: &mut [f64] = if pointwise {
                &mut grad_in.data_mut()[s * in_len..(s + 1) * in_len]
            } else {
                &mut dcol
            };
            unsafe {
                matrixmultiply::dgemm(
                    kdim,
                    self.out_channels,
                    p,
                    1.0,
                    self.weight.value.as_ptr(),
                    1,
                    kdim as isize,
                    dy.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    target.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            if !pointwise {
                let dst = &mut grad_in.data_mut()[s * in_len..(s + 1) * in_len];
                self.col2im(&dcol, h, w, oh, ow, dst);
            }
        }
        Ok(grad_in)
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Per-channel batch normalization over `(batch, height, width)`.
///
/// Used both on spatial maps and, with `height = width = 1`, on flattened vectors.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    shape: [usize; 4],
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            scale: Param::learnable(vec![channels], vec![1.0; channels]),
            shift: Param::learnable(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let [n, c, h, w] = x.shape();
        if c != self.channels {
            return Err(Error::dimension("normalization channels", self.channels, c));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for s in 0..n {
                        let off = (s * c + ch) * plane;
                        sum += x.data()[off..off + plane].iter().sum::<f64>();
                    }
                    let m = sum / count;
                    let mut sq = 0.0;
                    for s in 0..n {
                        let off = (s * c + ch) * plane;
                        sq += x.data()[off..off + plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut normalized = vec![0.0; x.data().len()];
        let mut out = FeatureMap::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let (g, b) = (self.scale.value[ch], self.shift.value[ch]);
                for i in off..off + plane {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out.data_mut()[i] = g * xh + b;
                }
            }
        }
        self.cache = Some(BnCache {
            shape: x.shape(),
            normalized,
            inv_std,
            batch_stats: mode == Mode::Train,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("normalization backward without forward".into()))?;
        grad_out.ensure_shape(cache.shape, "normalization gradient")?;
        let [n, c, h, w] = cache.shape;
        let plane = h * w;
        let count = (n * plane) as f64;
        let dy = grad_out.data();
        let mut grad_in = FeatureMap::zeros(cache.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for s in 0..n {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy += dy[i];
                    sum_dy_xh += dy[i] * cache.normalized[i];
                }
            }
            self.shift.grad[ch] += sum_dy;
            self.scale.grad[ch] += sum_dy_xh;
            let g = self.scale.value[ch] * cache.inv_std[ch];
            for s in 0..n {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    grad_in.data_mut()[i] = if cache.batch_stats {
                        g * (dy[i] - sum_dy / count - cache.normalized[i] * sum_dy_xh / count)
                    } else {
                        g * dy[i]
                    };
                }
            }
        }
        Ok(grad_in)
    }
}

impl Parameterized for BatchNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Piecewise for Relu {
    fn hash_pattern(&self, mut h: &mut dyn Hasher) {
        self.mask.hash(&mut h);
    }
}

impl Relu {
    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        // NaN counts as active so that it propagates, forward and backward.
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0 || v.is_nan()).collect();
        let out = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        self.mask = Some(mask);
        FeatureMap::from_vec(x.shape(), out).expect("same shape")
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::Usage("rectifier backward without forward".into()))?;
        if mask.len() != grad_out.data().len() {
            return Err(Error::dimension(
                "rectifier gradient",
                mask.len(),
                grad_out.shape(),
            ));
        }
        let mut g = grad_out.clone();
        for (v, keep) in g.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(g)
    }
}

/// Max pooling with square window; padding cells never win and NaN wins.
#[derive(Clone, Debug)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl Piecewise for MaxPool {
    fn hash_pattern(&self, mut h: &mut dyn Hasher) {
        self.cache.as_ref().map(|c| &c.1).hash(&mut h);
    }
}

impl MaxPool {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::dimension("pooling input", self.kernel, (h, w)));
        }
        Ok((
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        ))
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w)?;
        let mut out = FeatureMap::zeros([n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut idx = 0;
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = base;
                        for ki in 0..self.kernel {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = base + iy as usize * w + ix as usize;
                                if !best.is_nan() && (x.data()[i] > best || x.data()[i].is_nan()) {
                                    best = x.data()[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.data_mut()[idx] = best;
                        argmax[idx] = best_i;
                        idx += 1;
                    }
                }
            }
        }
        self.cache = Some((x.shape(), argmax));
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let (shape, argmax) = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("pooling backward without forward".into()))?;
        if argmax.len() != grad_out.data().len() {
            return Err(Error::dimension(
                "pooling gradient",
                argmax.len(),
                grad_out.shape(),
            ));
        }
        let mut g = FeatureMap::zeros(shape);
        for (&i, &d) in argmax.iter().zip(grad_out.data()) {
            g.data_mut()[i] += d;
        }
        Ok(g)
    }
}

/// Global average pool to `(batch, channels, 1, 1)`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let [n, c, _, _] = x.shape();
        let plane = x.plane_len();
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.shape = Some(x.shape());
        FeatureMap::from_vec([n, c, 1, 1], data).expect("pooled shape")
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let shape = self
            .shape
            .take()
            .ok_or_else(|| Error::Usage("pooling backward without forward".into()))?;
        let [n, c, h, w] = shape;
        grad_out.ensure_shape([n, c, 1, 1], "average pooling gradient")?;
        let plane = h * w;
        let mut g = FeatureMap::zeros(shape);
        for (dst, &d) in g.data_mut().chunks_mut(plane).zip(grad_out.data()) {
            dst.iter_mut().for_each(|v| *v = d / plane as f64);
        }
        Ok(g)
    }
}

/// Fully connected layer on `(batch, in, 1, 1)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<FeatureMap>,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let uniform = Uniform::new(-bound, bound).expect("non-empty range");
        let weight = (0..in_features * out_features)
            .map(|_| uniform.sample(rng))
            .collect();
        let bias = (0..out_features).map(|_| uniform.sample(rng)).collect();
        Self {
            in_features,
            out_features,
            weight: Param::learnable(vec![out_features, in_features], weight),
            bias: Param::learnable(vec![out_features], bias),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let [n, c, h, w] = x.shape();
        if c * h * w != self.in_features {
            return Err(Error::dimension("dense input", self.in_features, x.shape()));
        }
        let mut out = FeatureMap::zeros([n, self.out_features, 1, 1]);
        for s in 0..n {
            let xs = x.sample(s);
            for o in 0..self.out_features {
                let row = &self.weight.value[o * self.in_features..(o + 1) * self.in_features];
                let dot: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
                out.data_mut()[s * self.out_features + o] = dot + self.bias.value[o];
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Usage("dense backward without forward".into()))?;
        let n = x.batch();
        grad_out.ensure_shape([n, self.out_features, 1, 1], "dense gradient")?;
        let mut g = FeatureMap::zeros(x.shape());
        for s in 0..n {
            let xs = x.sample(s);
            for o in 0..self.out_features {
                let d = grad_out.data()[s * self.out_features + o];
                self.bias.grad[o] += d;
                let off = o * self.in_features;
                for i in 0..self.in_features {
                    self.weight.grad[off + i] += d * xs[i];
                    g.data_mut()[s * self.in_features + i] += d * self.weight.value[off + i];
                }
            }
        }
        Ok(g)
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = conv.output_hw(h, w).unwrap();
        let k = conv.kernel;
        let mut out = FeatureMap::zeros([n, conv.out_channels, oh, ow]);
        let mut i = 0;
        for s in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy =
                                        (oy * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix =
                                        (ox * conv.stride + kj) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += conv.weight.value[((o * c + ci) * k + ki) * k + kj]
                                        * x.at(s, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.data_mut()[i] = acc;
                        i += 1;
                    }
                }
            }
        }
        out
    }

    fn random_map(shape: [usize; 4], rng: &mut ChaCha8Rng) -> FeatureMap {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = (0..shape.iter().product())
            .map(|_| normal.sample(rng))
            .collect();
        FeatureMap::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, bias) in &[
            (3, 1, 1, false),
            (3, 2, 1, true),
            (7, 2, 3, false),
            (1, 2, 0, false),
            (1, 1, 0, true),
        ] {
            let mut conv = Conv2d::new(3, 4, k, s, p, bias, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value = vec![0.1, -0.2, 0.3, 0.4];
            }
            let x = random_map([2, 3, 9, 8], &mut rng);
            let fast = conv.forward(&x, Mode::Eval).unwrap();
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(3, 4, 3, 1, 1, false, &mut rng);
        let x = FeatureMap::zeros([1, 2, 4, 4]);
        assert!(matches!(
            conv.forward(&x, Mode::Train),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNorm::new(2);
        let x = random_map([4, 2, 3, 3], &mut rng).map(|v| 3.0 * v + 1.0);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| (0..9).map(move |i| (s, i)))
                .map(|(s, i)| y.data()[(s * 2 + ch) * 9 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().all(|m| m.abs() > 0.0));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = MaxPool::new(3, 2, 1);
        let x = FeatureMap::from_vec([1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = pool
            .backward(&FeatureMap::filled([1, 1, 1, 1], 1.0))
            .unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut relu = Relu::default();
        assert!(relu.backward(&FeatureMap::zeros([1, 1, 1, 1])).is_err());
    }
}
