//! Differentiable building blocks with explicit forward caches.
//!
//! Every `forward` returns the output together with whatever the matching
//! `backward` needs. Backward passes accumulate parameter gradients into a
//! [`Grads`] store and return the input gradient when asked for it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{FeatureMap, Matrix};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Where batch normalisation takes its statistics from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Batch statistics while training (accumulated into running averages),
    /// running averages at evaluation.
    RunningStats,
    /// Statistics of the current batch in both modes; running buffers are
    /// never touched.
    #[default]
    PerBatch,
}

/// Access to batch-norm running statistics during a forward pass.
pub enum Buffers<'a, T> {
    Frozen(&'a ParamStore<T>),
    Tracking(&'a mut ParamStore<T>),
}

impl<T: Scalar> Buffers<'_, T> {
    fn get(&self, id: ParamId) -> &[T] {
        match self {
            Buffers::Frozen(b) => b.get(id),
            Buffers::Tracking(b) => b.get(id),
        }
    }
}

pub(crate) fn he_normal<T: Scalar, R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::lit(normal.sample(rng))).collect()
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect()
}

// ---------------------------------------------------------------------------
// Convolution

/// 2-D convolution without bias (always followed by batch norm).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    input: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            he_normal(out_channels * fan_in, fan_in, rng),
        );
        Self {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |x: usize| {
            (x + 2 * self.pad)
                .checked_sub(self.kernel)
                .map(|v| v / self.stride + 1)
        };
        match (span(h), span(w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Shape(format!(
                "{h}x{w} input too small for a {k}x{k} convolution",
                k = self.kernel
            ))),
        }
    }

    fn im2col<T: Scalar>(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (n, h, w) = (x.batch, x.height, x.width);
        let cols_n = n * oh * ow;
        let mut cols = vec![T::zero(); self.in_channels * k * k * cols_n];
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..n {
                        let src_plane = &x.data[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src_plane[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut dst_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dims: (usize, usize, usize, usize), oh: usize, ow: usize) -> FeatureMap<T> {
        let (c, n, h, w) = dims;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let cols_n = n * oh * ow;
        let mut dx = FeatureMap::zeros(c, n, h, w);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..n {
                        let plane = &mut dx.data[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            let src = &src_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, ConvCache<T>)> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let (oh, ow) = self.out_size(x.height, x.width)?;
        let cols = self.im2col(x, oh, ow);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let ncols = x.batch * oh * ow;
        let mut out = FeatureMap::zeros(self.out_channels, x.batch, oh, ow);
        gemm(
            false,
            false,
            self.out_channels,
            ncols,
            kdim,
            T::one(),
            params.get(self.weight),
            &cols,
            T::zero(),
            &mut out.data,
        );
        let cache = ConvCache {
            cols,
            input: (x.channels, x.batch, x.height, x.width),
            out_hw: (oh, ow),
        };
        Ok((out, cache))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &ConvCache<T>,
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let kdim = self.in_channels * self.kernel * self.kernel;
        let (oh, ow) = cache.out_hw;
        let ncols = cache.input.1 * oh * ow;
        gemm(
            false,
            true,
            self.out_channels,
            kdim,
            ncols,
            T::one(),
            &dy.data,
            &cache.cols,
            T::one(),
            grads.get_mut(self.weight),
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); kdim * ncols];
        gemm(
            true,
            false,
            kdim,
            ncols,
            self.out_channels,
            T::one(),
            params.get(self.weight),
            &dy.data,
            T::zero(),
            &mut dcols,
        );
        Some(self.col2im(&dcols, cache.input, oh, ow))
    }
}

// ---------------------------------------------------------------------------
// Batch normalisation

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(params: &mut ParamStore<T>, buffers: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: params.add(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]),
            running_mean: buffers.add(format!("{name}.running_mean"), vec![channels], vec![T::zero(); channels]),
            running_var: buffers.add(format!("{name}.running_var"), vec![channels], vec![T::one(); channels]),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        buffers: &mut Buffers<'_, T>,
        x: &FeatureMap<T>,
        mode: Mode,
        policy: BnPolicy,
    ) -> (FeatureMap<T>, BnCache<T>) {
        let m = x.batch * x.plane();
        let batch_stats = policy == BnPolicy::PerBatch || mode == Mode::Train;
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let eps = T::lit(self.eps);
        let mut out = FeatureMap::zeros(x.channels, x.batch, x.height, x.width);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); self.channels];
        let mut batch_means = vec![T::zero(); self.channels];
        let mut batch_vars = vec![T::zero(); self.channels];
        let mf = T::from_usize_lossy(m);
        for c in 0..self.channels {
            let xs = &x.data[c * m..(c + 1) * m];
            let (mean, var) = if batch_stats {
                let mean = xs.iter().copied().sum::<T>() / mf;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                batch_means[c] = mean;
                batch_vars[c] = var;
                (mean, var)
            } else {
                (buffers.get(self.running_mean)[c], buffers.get(self.running_var)[c])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[c] = is;
            let xh = &mut xhat[c * m..(c + 1) * m];
            let ys = &mut out.data[c * m..(c + 1) * m];
            for ((h, y), &v) in xh.iter_mut().zip(ys.iter_mut()).zip(xs) {
                *h = (v - mean) * is;
                *y = gamma[c] * *h + beta[c];
            }
        }
        if policy == BnPolicy::RunningStats && mode == Mode::Train {
            if let Buffers::Tracking(bufs) = buffers {
                let mom = T::lit(self.momentum);
                let unbias = if m > 1 {
                    mf / T::from_usize_lossy(m - 1)
                } else {
                    T::one()
                };
                let rm = bufs.get_mut(self.running_mean);
                for (r, &b) in rm.iter_mut().zip(&batch_means) {
                    *r = (T::one() - mom) * *r + mom * b;
                }
                let rv = bufs.get_mut(self.running_var);
                for (r, &b) in rv.iter_mut().zip(&batch_vars) {
                    *r = (T::one() - mom) * *r + mom * b * unbias;
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BnCache<T>,
        dy: &FeatureMap<T>,
    ) -> FeatureMap<T> {
        let m = dy.batch * dy.plane();
        let mf = T::from_usize_lossy(m);
        let gamma = params.get(self.gamma).to_vec();
        let mut dx = FeatureMap::zeros(dy.channels, dy.batch, dy.height, dy.width);
        let mut dgamma = vec![T::zero(); self.channels];
        let mut dbeta = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let dys = &dy.data[c * m..(c + 1) * m];
            let xh = &cache.xhat[c * m..(c + 1) * m];
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for (&g, &h) in dys.iter().zip(xh) {
                sum_dy += g;
                sum_dy_xh += g * h;
            }
            dgamma[c] = sum_dy_xh;
            dbeta[c] = sum_dy;
            let scale = gamma[c] * cache.inv_std[c];
            let dxs = &mut dx.data[c * m..(c + 1) * m];
            if cache.batch_stats {
                let mean_dy = sum_dy / mf;
                let mean_dy_xh = sum_dy_xh / mf;
                for ((d, &g), &h) in dxs.iter_mut().zip(dys).zip(xh) {
                    *d = scale * (g - mean_dy - h * mean_dy_xh);
                }
            } else {
                for (d, &g) in dxs.iter_mut().zip(dys) {
                    *d = scale * g;
                }
            }
        }
        for (g, d) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += *d;
        }
        for (g, d) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += *d;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Element-wise and pooling

/// In-place ReLU; returns the active-unit mask. NaN passes through.
pub fn relu_forward<T: Scalar>(data: &mut [T]) -> Vec<bool> {
    data.iter_mut()
        .map(|v| {
            let on = !(*v <= T::zero());
            if !on {
                *v = T::zero();
            }
            on
        })
        .collect()
}

pub fn relu_backward<T: Scalar>(grad: &mut [T], mask: &[bool]) {
    for (g, &on) in grad.iter_mut().zip(mask) {
        if !on {
            *g = T::zero();
        }
    }
}

/// Max pooling with implicit `-inf` padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ceil_mode: bool,
}

#[derive(Debug)]
pub struct PoolCache {
    argmax: Vec<u32>,
    input: (usize, usize, usize, usize),
}

impl MaxPool2d {
    fn out_len(&self, x: usize) -> usize {
        if x + 2 * self.pad < self.kernel {
            return 1;
        }
        let span = x + 2 * self.pad - self.kernel;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        // the last window must start inside the input or left padding
        if self.ceil_mode && (out - 1) * self.stride >= x + self.pad {
            out -= 1;
        }
        out
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !self.ceil_mode && (h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel) {
            return Err(Error::Shape(format!("{h}x{w} input too small for max pooling")));
        }
        Ok((self.out_len(h), self.out_len(w)))
    }

    pub fn forward<T: Scalar>(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, PoolCache)> {
        let (oh, ow) = self.out_size(x.height, x.width)?;
        let (h, w) = (x.height, x.width);
        let planes = x.channels * x.batch;
        let mut out = FeatureMap::zeros(x.channels, x.batch, oh, ow);
        let mut argmax = vec![0u32; planes * oh * ow];
        for p in 0..planes {
            let src = &x.data[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let y0 = (oy * self.stride) as isize - self.pad as isize;
                let ys = y0.max(0) as usize..((y0 + self.kernel as isize) as usize).min(h);
                for ox in 0..ow {
                    let x0 = (ox * self.stride) as isize - self.pad as isize;
                    let xs = x0.max(0) as usize..((x0 + self.kernel as isize) as usize).min(w);
                    let mut best = ys.start * w + xs.start;
                    for yy in ys.clone() {
                        for xx in xs.clone() {
                            if src[yy * w + xx] > src[best] {
                                best = yy * w + xx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out.data[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        Ok((
            out,
            PoolCache {
                argmax,
                input: (x.channels, x.batch, h, w),
            },
        ))
    }

    pub fn backward<T: Scalar>(&self, cache: &PoolCache, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let (c, n, h, w) = cache.input;
        let mut dx = FeatureMap::zeros(c, n, h, w);
        let out_plane = dy.plane();
        for (o, &g) in dy.data.iter().enumerate() {
            let p = o / out_plane;
            dx.data[p * h * w + cache.argmax[o] as usize] += g;
        }
        dx
    }
}

/// Mean over the spatial plane; `[C][N][H][W]` -> `N x C`.
pub fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Matrix<T> {
    let plane = x.plane();
    let inv = T::one() / T::from_usize_lossy(plane);
    let mut out = Matrix::zeros(x.batch, x.channels);
    for c in 0..x.channels {
        for b in 0..x.batch {
            let s: T = x.data[(c * x.batch + b) * plane..(c * x.batch + b + 1) * plane]
                .iter()
                .copied()
                .sum();
            out.data[b * x.channels + c] = s * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Matrix<T>, dims: (usize, usize, usize, usize)) -> FeatureMap<T> {
    let (c, n, h, w) = dims;
    let plane = h * w;
    let inv = T::one() / T::from_usize_lossy(plane);
    let mut dx = FeatureMap::zeros(c, n, h, w);
    for ci in 0..c {
        for b in 0..n {
            let g = dy.data[b * c + ci] * inv;
            dx.data[(ci * n + b) * plane..(ci * n + b + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = g);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Dense layers

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Weights and bias uniform in `+-1/sqrt(in_features)`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            vec![out_features, in_features],
            uniform(out_features * in_features, bound, rng),
        );
        let bias = params.add(format!("{name}.bias"), vec![out_features], uniform(out_features, bound, rng));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols != self.in_features {
            return Err(Error::Shape(format!(
                "linear layer expects {} features, got {}",
                self.in_features, x.cols
            )));
        }
        let mut y = Matrix::zeros(x.rows, self.out_features);
        gemm(
            false,
            true,
            x.rows,
            self.out_features,
            self.in_features,
            T::one(),
            &x.data,
            params.get(self.weight),
            T::zero(),
            &mut y.data,
        );
        let bias = params.get(self.bias);
        for r in 0..y.rows {
            for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Matrix<T>,
        dy: &Matrix<T>,
    ) -> Matrix<T> {
        gemm(
            true,
            false,
            self.out_features,
            self.in_features,
            dy.rows,
            T::one(),
            &dy.data,
            &x.data,
            T::one(),
            grads.get_mut(self.weight),
        );
        let gb = grads.get_mut(self.bias);
        for r in 0..dy.rows {
            for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(dy.rows, self.in_features);
        gemm(
            false,
            false,
            dy.rows,
            self.in_features,
            self.out_features,
            T::one(),
            &dy.data,
            params.get(self.weight),
            T::zero(),
            &mut dx.data,
        );
        dx
    }
}

/// Inverted dropout: surviving units are scaled by `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}
