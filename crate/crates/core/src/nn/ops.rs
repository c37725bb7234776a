//! Layer kernels and their backward passes.
//!
//! Per-sample work is independent of the rest of the batch, so a sample's
//! output does not depend on what it is batched with. Reductions over the
//! batch run in ascending sample order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gemm::{gemm, gemm_nt, gemm_packed, gemm_with, Layout, PANEL};
use crate::nn::{Real, Tensor};

/// Convolution shape: `out_channels x in_channels x kernel x kernel`
/// weights applied with the given stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// The same convolution evaluated at every position (stride 1).
    pub fn dense(&self) -> Self {
        Self { stride: 1, ..*self }
    }

    /// `floor((H + 2p - K) / s) + 1` per axis.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        let span = |len: usize| {
            (len + 2 * self.padding)
                .checked_sub(self.kernel)
                .map(|v| v / self.stride + 1)
        };
        match (span(height), span(width)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "kernel {} with padding {} does not fit a {height}x{width} input",
                self.kernel, self.padding
            ))),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn check_conv(
    input: &Tensor<impl Real>,
    weight_len: usize,
    bias_len: Option<usize>,
    geom: &ConvGeometry,
) -> Result<(usize, usize)> {
    if input.channels() != geom.in_channels {
        return Err(Error::Shape(format!(
            "convolution expects {} input channels, got {}",
            geom.in_channels,
            input.channels()
        )));
    }
    if weight_len != geom.weight_len() {
        return Err(Error::Shape(format!(
            "convolution weights need {} values ({}x{}x{}x{}), got {weight_len}",
            geom.weight_len(),
            geom.out_channels,
            geom.in_channels,
            geom.kernel,
            geom.kernel
        )));
    }
    if let Some(len) = bias_len {
        if len != geom.out_channels {
            return Err(Error::Shape(format!(
                "convolution bias needs {} values, got {len}",
                geom.out_channels
            )));
        }
    }
    geom.output_size(input.height(), input.width())
}

/// Output columns `ox` whose input column `ox*s + kx - p` lies in `[0, w)`.
fn valid_columns(w: usize, wo: usize, s: usize, kx: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kx).div_ceil(s).min(wo);
    let hi = if w + p > kx {
        ((w + p - kx - 1) / s + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one sample into a `(C*K*K) x (Ho*Wo)` patch matrix.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, geom: &ConvGeometry, ho: usize, wo: usize, col: &mut [T]) {
    let (k, s, p) = (geom.kernel, geom.stride, geom.padding);
    let cols = ho * wo;
    for ci in 0..geom.in_channels {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * cols..][..cols];
                let (lo, hi) = valid_columns(w, wo, s, kx, p);
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * s + kx - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (d, &v) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Real>(col: &[T], h: usize, w: usize, geom: &ConvGeometry, ho: usize, wo: usize, dx: &mut [T]) {
    let (k, s, p) = (geom.kernel, geom.stride, geom.padding);
    let cols = ho * wo;
    for ci in 0..geom.in_channels {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * cols..][..cols];
                let (lo, hi) = valid_columns(w, wo, s, kx, p);
                if lo >= hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let start = lo * s + kx - p;
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    if s == 1 {
                        for (d, &v) in dst[start..start + src.len()].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(s).zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Copies one sample into zero-bordered planes of `(H + 2p) x (W + 2p)`.
fn pad_sample<T: Real>(x: &[T], channels: usize, h: usize, w: usize, p: usize, dst: &mut Vec<T>) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    dst.clear();
    dst.resize(channels * hp * wp, T::zero());
    for ci in 0..channels {
        for y in 0..h {
            let to = (ci * hp + y + p) * wp + p;
            dst[to..to + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
}

/// Writes columns `j0..j0 + nr` of a padded sample's patch matrix (the
/// matrix [`im2col`] would build) into a gemm panel.
#[allow(clippy::too_many_arguments)]
fn pack_patches<T: Real>(
    xpad: &[T],
    hp: usize,
    wp: usize,
    geom: &ConvGeometry,
    wo: usize,
    j0: usize,
    nr: usize,
    panel: &mut [T],
) {
    let (k, s) = (geom.kernel, geom.stride);
    // Runs of columns within one output row: (panel column, length, offset).
    let mut runs = [(0usize, 0usize, 0usize); PANEL];
    let mut count = 0;
    let mut j = j0;
    while j < j0 + nr {
        let (oy, ox) = (j / wo, j % wo);
        let len = (wo - ox).min(j0 + nr - j);
        runs[count] = (j - j0, len, oy * s * wp + ox * s);
        count += 1;
        j += len;
    }
    let runs = &runs[..count];
    let mut t = 0;
    for ci in 0..geom.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let base = (ci * hp + ky) * wp + kx;
                let row = &mut panel[t * PANEL..(t + 1) * PANEL];
                for &(at, len, offset) in runs {
                    let src = &xpad[base + offset..];
                    let dst = &mut row[at..at + len];
                    if s == 1 {
                        dst.copy_from_slice(&src[..len]);
                    } else {
                        for (d, &v) in dst.iter_mut().zip(src.iter().step_by(s)) {
                            *d = v;
                        }
                    }
                }
                t += 1;
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. Weights are
/// `[out][in][ky][kx]`, row-major.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &[T], bias: Option<&[T]>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (ho, wo) = check_conv(input, weight.len(), bias.map(<[T]>::len), geom)?;
    let (n, h, w) = (input.batch(), input.height(), input.width());
    let co = geom.out_channels;
    let patch = geom.patch_len();
    let mut out = Tensor::zeros([n, co, ho, wo]);
    if n == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(co * ho * wo)
        .enumerate()
        .for_each_init(Vec::new, |xpad, (s, dst)| {
            let x = input.sample(s);
            if geom.is_pointwise() {
                gemm(co, ho * wo, patch, weight, x, dst);
            } else {
                let p = geom.padding;
                pad_sample(x, geom.in_channels, h, w, p, xpad);
                let (hp, wp) = (h + 2 * p, w + 2 * p);
                let pack = |j0, nr, panel: &mut [T]| pack_patches(xpad, hp, wp, geom, wo, j0, nr, panel);
                gemm_packed(co, ho * wo, patch, weight, pack, dst);
            }
            if let Some(b) = bias {
                for (plane, &bv) in dst.chunks_exact_mut(ho * wo).zip(b) {
                    plane.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    /// `None` when parameter gradients were not requested.
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    has_bias: bool,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
    param_grads: bool,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = check_conv(input, weight.len(), None, geom)?;
    let (n, h, w) = (input.batch(), input.height(), input.width());
    let co = geom.out_channels;
    if grad_out.dims() != [n, co, ho, wo] {
        return Err(Error::Shape(format!(
            "convolution output gradient is {:?}, expected {:?}",
            grad_out.dims(),
            [n, co, ho, wo]
        )));
    }
    let patch = geom.patch_len();
    let pixels = ho * wo;
    if geom.stride == 1 && !geom.is_pointwise() && geom.padding < geom.kernel {
        return conv2d_backward_dense(input, weight, has_bias, geom, grad_out, param_grads);
    }
    let mut grad_input = Tensor::zeros(input.dims());
    let per_sample_dw: Vec<Option<Vec<T>>> = grad_input
        .data_mut()
        .par_chunks_mut(input.sample_len())
        .enumerate()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(col, dcol), (s, dx)| {
                let x = input.sample(s);
                let dy = grad_out.sample(s);
                let col: &[T] = if geom.is_pointwise() {
                    x
                } else {
                    col.resize(patch * pixels, T::zero());
                    im2col(x, h, w, geom, ho, wo, col);
                    col
                };
                if geom.is_pointwise() {
                    gemm_with(patch, pixels, co, weight, Layout::Transposed, dy, Layout::Normal, dx);
                } else {
                    dcol.resize(patch * pixels, T::zero());
                    gemm_with(patch, pixels, co, weight, Layout::Transposed, dy, Layout::Normal, dcol);
                    col2im(dcol, h, w, geom, ho, wo, dx);
                }
                param_grads.then(|| {
                    // dW = dy * col^T
                    let mut dw = vec![T::zero(); co * patch];
                    gemm_nt(co, patch, pixels, dy, col, &mut dw);
                    dw
                })
            },
        )
        .collect();

    let mut weight_grad = param_grads.then(|| vec![T::zero(); weight.len()]);
    if let Some(sum) = weight_grad.as_mut() {
        for dw in per_sample_dw.iter().flatten() {
            sum.iter_mut().zip(dw).for_each(|(a, &b)| *a = *a + b);
        }
    }
    let bias_grad = (param_grads && has_bias).then(|| bias_gradient(grad_out));
    Ok(ConvGrads {
        input: grad_input,
        weight: weight_grad,
        bias: bias_grad,
    })
}

/// Stride-1 case: the input gradient is the output gradient convolved
/// with the spatially flipped, channel-swapped kernel.
fn conv2d_backward_dense<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    has_bias: bool,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
    param_grads: bool,
) -> Result<ConvGrads<T>> {
    let (ci, co, k) = (geom.in_channels, geom.out_channels, geom.kernel);
    let mut flipped = vec![T::zero(); weight.len()];
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((i * co + o) * k + k - 1 - ky) * k + k - 1 - kx] =
                        weight[((o * ci + i) * k + ky) * k + kx];
                }
            }
        }
    }
    let adjoint = ConvGeometry::new(co, ci, k, 1, k - 1 - geom.padding);
    let grad_input = conv2d(grad_out, &flipped, None, &adjoint)?;
    if grad_input.dims() != input.dims() {
        return Err(Error::Shape("convolution adjoint changed the input size".into()));
    }
    let (weight_grad, bias_grad) = if param_grads {
        let (n, h, w) = (input.batch(), input.height(), input.width());
        let (ho, wo) = (grad_out.height(), grad_out.width());
        let patch = geom.patch_len();
        let per_sample: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map_init(Vec::new, |col, s| {
                col.resize(patch * ho * wo, T::zero());
                im2col(input.sample(s), h, w, geom, ho, wo, col);
                let mut dw = vec![T::zero(); co * patch];
                gemm_nt(co, patch, ho * wo, grad_out.sample(s), col, &mut dw);
                dw
            })
            .collect();
        let mut sum = vec![T::zero(); weight.len()];
        for dw in &per_sample {
            sum.iter_mut().zip(dw).for_each(|(a, &b)| *a = *a + b);
        }
        (Some(sum), has_bias.then(|| bias_gradient(grad_out)))
    } else {
        (None, None)
    };
    Ok(ConvGrads {
        input: grad_input,
        weight: weight_grad,
        bias: bias_grad,
    })
}

fn bias_gradient<T: Real>(grad_out: &Tensor<T>) -> Vec<T> {
    let pixels = grad_out.height() * grad_out.width();
    let mut db = vec![T::zero(); grad_out.channels()];
    for s in 0..grad_out.batch() {
        for (c, plane) in grad_out.sample(s).chunks_exact(pixels).enumerate() {
            db[c] = db[c] + plane.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    db
}

/// Max-pool window, stride and leading padding. Padded positions act as
/// negative infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Border handling of the stride-1 max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolPadding {
    /// Only windows fully inside the input: output `H - k + 1`.
    Valid,
    /// Output keeps the input size; the window at `a` starts at
    /// `a - (k - 1) / 2`.
    Same,
}

/// Output of a max pool plus the flat input index each output came from.
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

fn maxpool_core<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    lead: usize,
    out_h: usize,
    out_w: usize,
) -> PoolOutput<T> {
    let [n, c, h, w] = input.dims();
    let mut output = Vec::with_capacity(n * c * out_h * out_w);
    let mut argmax = Vec::with_capacity(n * c * out_h * out_w);
    for (pi, plane) in input.data().chunks_exact(h * w).enumerate() {
        for oy in 0..out_h {
            let y0 = (oy * stride) as isize - lead as isize;
            for ox in 0..out_w {
                let x0 = (ox * stride) as isize - lead as isize;
                let mut best = T::neg_infinity();
                let mut best_idx = None;
                for y in y0.max(0)..(y0 + window as isize).min(h as isize) {
                    for x in x0.max(0)..(x0 + window as isize).min(w as isize) {
                        let idx = y as usize * w + x as usize;
                        if best_idx.is_none() || plane[idx] > best {
                            best = plane[idx];
                            best_idx = Some(idx);
                        }
                    }
                }
                let best_idx = best_idx.expect("padding is smaller than the window");
                output.push(best);
                argmax.push((pi * h * w + best_idx) as u32);
            }
        }
    }
    PoolOutput {
        output: Tensor::new([n, c, out_h, out_w], output).expect("pool output shape"),
        argmax,
    }
}

/// Strided max pool: output `floor((H + 2p - k) / s) + 1` per axis.
pub fn maxpool2d<T: Real>(input: &Tensor<T>, geom: &PoolGeometry) -> Result<PoolOutput<T>> {
    let (k, s, p) = (geom.window, geom.stride, geom.padding);
    if k == 0 || s == 0 || p >= k {
        return Err(Error::Shape(format!(
            "invalid pool geometry: window {k}, stride {s}, padding {p}"
        )));
    }
    let (h, w) = (input.height(), input.width());
    if h + 2 * p < k || w + 2 * p < k {
        return Err(Error::Shape(format!("pool window {k} larger than {h}x{w} input")));
    }
    let out_h = (h + 2 * p - k) / s + 1;
    let out_w = (w + 2 * p - k) / s + 1;
    Ok(maxpool_core(input, k, s, p, out_h, out_w))
}

/// Stride-1 max pool.
pub fn maxpool_dense<T: Real>(input: &Tensor<T>, window: usize, padding: PoolPadding) -> Result<PoolOutput<T>> {
    let (h, w) = (input.height(), input.width());
    if window == 0 || window > h || window > w {
        return Err(Error::Shape(format!("pool window {window} larger than {h}x{w} input")));
    }
    Ok(match padding {
        PoolPadding::Valid => maxpool_core(input, window, 1, 0, h - window + 1, w - window + 1),
        PoolPadding::Same => maxpool_core(input, window, 1, (window - 1) / 2, h, w),
    })
}

pub fn maxpool_backward<T: Real>(grad_out: &Tensor<T>, argmax: &[u32], input_dims: [usize; 4]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_dims);
    let data = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx as usize] = data[idx as usize] + g;
    }
    dx
}

/// Batch-norm statistics per channel. Running variance is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// The conventional starting point: zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn blend(&mut self, batch: &RunningStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

pub struct BnCache<T> {
    mode: BnMode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

pub struct BnOutput<T> {
    pub output: Tensor<T>,
    pub cache: BnCache<T>,
    /// Batch mean and unbiased variance, train mode only.
    pub batch_stats: Option<RunningStats<T>>,
}

pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<&RunningStats<T>>,
    mode: BnMode,
    eps: T,
) -> Result<BnOutput<T>> {
    let [n, c, h, w] = input.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batch norm over {c} channels got {} scales and {} shifts",
            gamma.len(),
            beta.len()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    let (mean, inv_std, batch_stats) = match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(Error::Shape(
                    "batch norm in train mode needs at least two values per channel".into(),
                ));
            }
            let cnt = T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = T::zero();
                for s in 0..n {
                    sum = sum + input.plane(s, ch).iter().fold(T::zero(), |a, &v| a + v);
                }
                let m = sum / cnt;
                let mut sq = T::zero();
                for s in 0..n {
                    sq = sq + input.plane(s, ch).iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
                }
                mean[ch] = m;
                var[ch] = sq / cnt;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let unbias = cnt / (cnt - T::one());
            let stats = RunningStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbias).collect(),
            };
            (mean, inv_std, Some(stats))
        }
        BnMode::Eval => {
            let stats = running.ok_or(Error::NoRunningStats)?;
            if stats.mean.len() != c || stats.var.len() != c {
                return Err(Error::Shape(format!(
                    "running statistics cover {} channels, input has {c}",
                    stats.mean.len()
                )));
            }
            let inv_std = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (stats.mean.clone(), inv_std, None)
        }
    };

    let mut xhat = Vec::with_capacity(input.data().len());
    let mut out = Vec::with_capacity(input.data().len());
    for (i, plane) in input.data().chunks_exact(hw).enumerate() {
        let ch = i % c;
        for &v in plane {
            let z = (v - mean[ch]) * inv_std[ch];
            xhat.push(z);
            out.push(gamma[ch] * z + beta[ch]);
        }
    }
    Ok(BnOutput {
        output: Tensor::new(input.dims(), out)?,
        cache: BnCache {
            mode,
            xhat: Tensor::new(input.dims(), xhat)?,
            inv_std,
        },
        batch_stats,
    })
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Real>(cache: &BnCache<T>, gamma: &[T], grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    let [n, c, h, w] = cache.xhat.dims();
    if grad_out.dims() != cache.xhat.dims() {
        return Err(Error::Shape("batch norm gradient shape mismatch".into()));
    }
    let hw = h * w;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let dy = grad_out.plane(s, ch);
            let xh = cache.xhat.plane(s, ch);
            dbeta[ch] = dbeta[ch] + dy.iter().fold(T::zero(), |a, &v| a + v);
            dgamma[ch] = dgamma[ch] + dy.iter().zip(xh).fold(T::zero(), |a, (&d, &x)| a + d * x);
        }
    }
    let mut dx = Vec::with_capacity(n * c * hw);
    match cache.mode {
        BnMode::Eval => {
            for (i, dy) in grad_out.data().chunks_exact(hw).enumerate() {
                let ch = i % c;
                let scale = gamma[ch] * cache.inv_std[ch];
                dx.extend(dy.iter().map(|&d| d * scale));
            }
        }
        BnMode::Train => {
            // dx = inv_std / M * (M * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            let m = T::from_usize(n * hw).unwrap();
            for (i, dy) in grad_out.data().chunks_exact(hw).enumerate() {
                let ch = i % c;
                let xh = &cache.xhat.data()[i * hw..(i + 1) * hw];
                let sum_dxhat = dbeta[ch] * gamma[ch];
                let sum_dxhat_xhat = dgamma[ch] * gamma[ch];
                let k = cache.inv_std[ch] / m;
                dx.extend(
                    dy.iter()
                        .zip(xh)
                        .map(|(&d, &x)| k * (m * d * gamma[ch] - sum_dxhat - x * sum_dxhat_xhat)),
                );
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.dims(), dx)?,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward output was positive.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.dims(), data).expect("relu gradient shape")
}

/// Mean over each plane: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.dims();
    let area = T::from_usize(h * w).unwrap();
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / area)
        .collect();
    Tensor::new([n, c, 1, 1], data).expect("pool output shape")
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, input_dims: [usize; 4]) -> Tensor<T> {
    let hw = input_dims[2] * input_dims[3];
    let area = T::from_usize(hw).unwrap();
    let mut data = Vec::with_capacity(input_dims.iter().product());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / area, hw));
    }
    Tensor::new(input_dims, data).expect("pool gradient shape")
}

/// `y = x W^T + b` on flattened samples; `weight` is `[out][in]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let (n, fin) = (input.batch(), input.sample_len());
    let fout = bias.len();
    if weight.len() != fout * fin {
        return Err(Error::Shape(format!(
            "linear layer {fout}x{} cannot take {fin} input features",
            weight.len() / fout.max(1)
        )));
    }
    let mut out = vec![T::zero(); n * fout];
    gemm_with(
        n,
        fout,
        fin,
        input.data(),
        Layout::Normal,
        weight,
        Layout::Transposed,
        &mut out,
    );
    for row in out.chunks_exact_mut(fout) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
    Tensor::new([n, fout, 1, 1], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    param_grads: bool,
) -> Result<LinearGrads<T>> {
    let (n, fin) = (input.batch(), input.sample_len());
    let fout = grad_out.sample_len();
    if weight.len() != fout * fin || grad_out.batch() != n {
        return Err(Error::Shape("linear gradient shape mismatch".into()));
    }
    let mut dx = vec![T::zero(); n * fin];
    gemm(n, fin, fout, grad_out.data(), weight, &mut dx);
    let (dw, db) = if param_grads {
        let dy = grad_out.data();
        let mut dw = vec![T::zero(); fout * fin];
        gemm_with(
            fout,
            fin,
            n,
            dy,
            Layout::Transposed,
            input.data(),
            Layout::Normal,
            &mut dw,
        );
        let mut db = vec![T::zero(); fout];
        for row in dy.chunks_exact(fout) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    Ok(LinearGrads {
        input: Tensor::new(input.dims(), dx)?,
        weight: dw,
        bias: db,
    })
}

/// Scaling of the cross-entropy over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub struct LossOutput<T> {
    pub loss: T,
    pub per_sample: Vec<T>,
    pub grad_logits: Tensor<T>,
}

/// Softmax cross-entropy of `[N, K]` logits against class labels.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<LossOutput<T>> {
    let (n, k) = (logits.batch(), logits.sample_len());
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    if n == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let scale = match reduction {
        Reduction::Mean => T::one() / T::from_usize(n).unwrap(),
        Reduction::Sum => T::one(),
    };
    let mut grad = Vec::with_capacity(n * k);
    let mut per_sample = Vec::with_capacity(n);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z = exps.iter().fold(T::zero(), |a, &v| a + v);
        per_sample.push(z.ln() + max - row[label]);
        for (j, e) in exps.iter().enumerate() {
            let p = *e / z;
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * scale);
        }
    }
    let total = per_sample.iter().fold(T::zero(), |a, &v| a + v);
    Ok(LossOutput {
        loss: total * scale,
        per_sample,
        grad_logits: Tensor::new(logits.dims(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(dims, data).unwrap()
    }

    #[test]
    fn pointwise_identity_conv() {
        let x = t([1, 1, 3, 3], (0..9).map(f64::from).collect());
        let y = conv2d(&x, &[1.0], Some(&[0.0]), &ConvGeometry::new(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_filter_preserves_constants() {
        let x = t([1, 1, 5, 5], vec![2.5; 25]);
        let y = conv2d(&x, &[1.0 / 9.0; 9], None, &ConvGeometry::new(1, 1, 3, 1, 0)).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn conv_shape_errors_name_dimensions() {
        let x = t([1, 2, 4, 4], vec![0.0; 32]);
        let err = conv2d(&x, &[0.0; 9], None, &ConvGeometry::new(1, 1, 3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("2"), "{err}");
        let big = ConvGeometry::new(2, 1, 7, 1, 0);
        assert!(conv2d(&x, &[0.0; 98], None, &big).is_err());
    }

    #[test]
    fn strided_conv_is_dense_then_downsample() {
        let x: Tensor<f32> = Tensor::new([2, 3, 8, 8], (0..384).map(|v| (v as f32 * 0.13).sin()).collect()).unwrap();
        let w: Vec<f32> = (0..4 * 27).map(|v| (v as f32 * 0.7).cos()).collect();
        let b = [0.1f32, -0.2, 0.3, 0.05];
        let geom = ConvGeometry::new(3, 4, 3, 2, 1);
        let strided = conv2d(&x, &w, Some(&b), &geom).unwrap();
        let dense = conv2d(&x, &w, Some(&b), &geom.dense()).unwrap().downsample(2).unwrap();
        assert_eq!(strided.dims(), dense.dims());
        for (a, b) in strided.data().iter().zip(dense.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool_dense(&x, 2, PoolPadding::Valid).unwrap();
        assert_eq!(y.output.data(), &[4.0]);
        let c = t([1, 2, 4, 4], vec![-3.0; 32]);
        let y = maxpool_dense(&c, 3, PoolPadding::Same).unwrap();
        assert!(y.output.data().iter().all(|&v| v == -3.0));
        assert!(maxpool_dense(&x, 3, PoolPadding::Valid).is_err());
    }

    #[test]
    fn batchnorm_modes() {
        let x = t([2, 1, 1, 2], vec![-1.0, 1.0, -1.0, 1.0]);
        let out = batchnorm(&x, &[1.0], &[0.0], None, BnMode::Train, 0.0).unwrap();
        for (a, b) in out.output.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let stats = out.batch_stats.unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.var[0] - 4.0 / 3.0).abs() < 1e-12);

        let shifted = batchnorm(&x, &[0.0], &[5.0], None, BnMode::Train, 1e-5).unwrap();
        assert!(shifted.output.data().iter().all(|&v| v == 5.0));

        assert!(matches!(
            batchnorm(&x, &[1.0], &[0.0], None, BnMode::Eval, 1e-5),
            Err(Error::NoRunningStats)
        ));
    }

    #[test]
    fn cross_entropy_limits() {
        let k = 7;
        let uniform = t([3, k, 1, 1], vec![0.25; 3 * k]);
        let out = softmax_cross_entropy(&uniform, &[0, 3, 6], Reduction::Mean).unwrap();
        assert!((out.loss - (k as f64).ln()).abs() < 1e-12);

        let mut confident = vec![0.0; k];
        confident[2] = 50.0;
        let out = softmax_cross_entropy(&t([1, k, 1, 1], confident), &[2], Reduction::Mean).unwrap();
        assert!(out.loss <= 1e-6);

        assert!(softmax_cross_entropy(&uniform, &[0, 1, 7], Reduction::Mean).is_err());
    }
}
