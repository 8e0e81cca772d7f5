//! Forward and backward kernels on plain tensors.
//!
//! Convolutions use cross-correlation (the kernel is not flipped):
//! `out[n,o,y,x] = b[o] + sum_{c,i,j} w[o,c,i,j] * in[n,c,y*s+i-p,x*s+j-p]`
//! with zero padding. They run as im2col + GEMM, chunked over output rows so
//! the column buffer stays bounded for large maps.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on elements held by one im2col buffer.
const COL_CHUNK: usize = 1 << 22;

/// Convolution weights plus geometry.
///
/// `kernel` is `(out_ch, in_ch, kh, kw)` for [`conv2d`]. For [`deconv2d`] the
/// same tensor is read as `(in_ch, out_ch, kh, kw)`, i.e. the kernel of the
/// convolution whose input-gradient the transposed convolution computes.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Self {
        Self { kernel, bias, stride, padding }
    }
}

/// Spatial extent after a convolution: `floor((extent + 2p - k) / s) + 1`.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "non-positive output extent: extent {extent}, kernel {kernel}, padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Spatial extent after a transposed convolution: `(extent - 1) * s - 2p + k`.
pub fn deconv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let full = (extent - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(Error::Shape("non-positive transposed-convolution output extent".into()));
    }
    Ok(full - 2 * padding)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunk_rows(&self) -> usize {
        (COL_CHUNK / (self.rows() * self.out_w).max(1)).clamp(1, self.out_h)
    }
}

/// Fills `cols` (rows() × (r1-r0)*out_w) from one sample's `(C,H,W)` slice.
fn im2col<T: Real>(src: &[T], g: &Geometry, r0: usize, r1: usize, cols: &mut [T]) {
    let len = (r1 - r0) * g.out_w;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * len..(row + 1) * len];
                for oy in r0..r1 {
                    let out_row = &mut dst[(oy - r0) * g.out_w..(oy - r0 + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { line[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `cols` back into a `(C,H,W)` slice; adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], g: &Geometry, r0: usize, r1: usize, dst: &mut [T]) {
    let len = (r1 - r0) * g.out_w;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * len..(row + 1) * len];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let in_row = &src[(oy - r0) * g.out_w..(oy - r0 + 1) * g.out_w];
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            line[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_geometry<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Geometry> {
    let [_, c, h, w] = x.dims4()?;
    let [_, kc, kh, kw] = kernel.dims4()?;
    if kc != c {
        return Err(Error::Shape(format!("channel mismatch: input has {c}, kernel expects {kc}")));
    }
    let out_h = conv_out_extent(h, kh, stride, pad)?;
    let out_w = conv_out_extent(w, kw, stride, pad)?;
    Ok(Geometry { channels: c, height: h, width: w, kh, kw, stride, pad, out_h, out_w })
}

fn check_bias<T>(bias: Option<&Tensor<T>>, len: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != len {
            return Err(Error::Shape(format!("bias has {} entries, expected {len}", b.numel())));
        }
    }
    Ok(())
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &p.kernel, p.bias.as_ref(), p.stride, p.padding)
}

pub(crate) fn conv2d_raw<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, kernel, stride, pad)?;
    let n = x.batch();
    let out_c = kernel.shape()[0];
    check_bias(bias, out_c)?;
    let plane = g.out_h * g.out_w;
    let mut out = Tensor::zeros(&[n, out_c, g.out_h, g.out_w]);
    let k = g.rows();
    let mut cols = Vec::new();
    for s in 0..n {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        if g.is_pointwise() {
            T::gemm(out_c, k, plane, T::one(), kernel.data(), k, 1, src, plane, 1, T::one(), dst, plane, 1);
            continue;
        }
        let step = g.chunk_rows();
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + step).min(g.out_h);
            let len = (r1 - r0) * g.out_w;
            cols.resize(k * len, T::zero());
            im2col(src, &g, r0, r1, &mut cols);
            T::gemm(
                out_c,
                k,
                len,
                T::one(),
                kernel.data(),
                k,
                1,
                &cols,
                len,
                1,
                T::one(),
                &mut dst[r0 * g.out_w..],
                plane,
                1,
            );
            r0 = r1;
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(dx, dkernel, dbias)`. `dx` is skipped unless requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = conv_geometry(x, kernel, stride, pad).expect("geometry validated in forward");
    let n = x.batch();
    let out_c = kernel.shape()[0];
    let k = g.rows();
    let plane = g.out_h * g.out_w;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[out_c]);
    for s in 0..n {
        let dys = dy.sample(s);
        for (o, chunk) in dys.chunks(plane).enumerate() {
            db.data_mut()[o] += chunk.iter().copied().sum::<T>();
        }
        let src = x.sample(s);
        if g.is_pointwise() {
            // dk += dy (O×P) · xᵀ (P×C)
            T::gemm(out_c, plane, k, T::one(), dys, plane, 1, src, 1, plane, T::one(), dk.data_mut(), k, 1);
            if let Some(dx) = dx.as_mut() {
                // dx (C×P) += kᵀ (C×O) · dy (O×P)
                T::gemm(k, out_c, plane, T::one(), kernel.data(), 1, k, dys, plane, 1, T::one(), dx.sample_mut(s), plane, 1);
            }
            continue;
        }
        let step = g.chunk_rows();
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + step).min(g.out_h);
            let len = (r1 - r0) * g.out_w;
            cols.resize(k * len, T::zero());
            im2col(src, &g, r0, r1, &mut cols);
            let dy_chunk = &dys[r0 * g.out_w..];
            T::gemm(out_c, len, k, T::one(), dy_chunk, plane, 1, &cols, 1, len, T::one(), dk.data_mut(), k, 1);
            if let Some(dx) = dx.as_mut() {
                dcols.resize(k * len, T::zero());
                T::gemm(k, out_c, len, T::one(), kernel.data(), 1, k, dy_chunk, plane, 1, T::zero(), &mut dcols, len, 1);
                col2im(&dcols, &g, r0, r1, dx.sample_mut(s));
            }
            r0 = r1;
        }
    }
    (dx, dk, db)
}

fn deconv_geometry<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Geometry> {
    let [_, c, h, w] = x.dims4()?;
    let [kin, kout, kh, kw] = kernel.dims4()?;
    if kin != c {
        return Err(Error::Shape(format!(
            "channel mismatch: input has {c}, transposed kernel expects {kin}"
        )));
    }
    let oh = deconv_out_extent(h, kh, stride, pad)?;
    let ow = deconv_out_extent(w, kw, stride, pad)?;
    // Geometry of the forward convolution that maps the deconv output back to its input.
    Ok(Geometry { channels: kout, height: oh, width: ow, kh, kw, stride, pad, out_h: h, out_w: w })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the kernel read as
/// `(in_ch, out_ch, kh, kw)`. Output extent is `(extent - 1) * s - 2p + k`.
pub fn deconv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    deconv2d_raw(x, &p.kernel, p.bias.as_ref(), p.stride, p.padding)
}

pub(crate) fn deconv2d_raw<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = deconv_geometry(x, kernel, stride, pad)?;
    let n = x.batch();
    let in_c = x.channels();
    let out_c = g.channels;
    check_bias(bias, out_c)?;
    let rows = g.rows();
    let plane_in = g.out_h * g.out_w;
    let plane_out = g.height * g.width;
    let mut out = Tensor::zeros(&[n, out_c, g.height, g.width]);
    let mut cols = vec![T::zero(); rows * plane_in];
    for s in 0..n {
        // cols (rows×P) = kᵀ (rows×Cin) · x (Cin×P)
        T::gemm(rows, in_c, plane_in, T::one(), kernel.data(), 1, rows, x.sample(s), plane_in, 1, T::zero(), &mut cols, plane_in, 1);
        let dst = out.sample_mut(s);
        col2im(&cols, &g, 0, g.out_h, dst);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(plane_out).enumerate() {
                let bo = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(out)
}

pub(crate) fn deconv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = deconv_geometry(x, kernel, stride, pad).expect("geometry validated in forward");
    let n = x.batch();
    let in_c = x.channels();
    let out_c = g.channels;
    let rows = g.rows();
    let plane_in = g.out_h * g.out_w;
    let plane_out = g.height * g.width;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[out_c]);
    let mut cols = vec![T::zero(); rows * plane_in];
    for s in 0..n {
        let dys = dy.sample(s);
        for (o, chunk) in dys.chunks(plane_out).enumerate() {
            db.data_mut()[o] += chunk.iter().copied().sum::<T>();
        }
        im2col(dys, &g, 0, g.out_h, &mut cols);
        // dk (Cin×rows) += x (Cin×P) · colsᵀ (P×rows)
        T::gemm(in_c, plane_in, rows, T::one(), x.sample(s), plane_in, 1, &cols, 1, plane_in, T::one(), dk.data_mut(), rows, 1);
        if let Some(dx) = dx.as_mut() {
            // dx (Cin×P) = k (Cin×rows) · cols (rows×P)
            T::gemm(in_c, rows, plane_in, T::one(), kernel.data(), rows, 1, &cols, plane_in, 1, T::zero(), dx.sample_mut(s), plane_in, 1);
        }
    }
    (dx, dk, db)
}

/// Non-overlapping max pooling (`window == stride`). Returns the pooled map
/// and, per output cell, the flat input index of the first maximum.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    max_pool2d_indexed(x, window, stride).map(|(t, _)| t)
}

pub(crate) fn max_pool2d_indexed<T: Real>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.dims4()?;
    if window == 0 || window != stride {
        return Err(Error::Shape(format!(
            "max pooling supports window == stride only, got window {window}, stride {stride}"
        )));
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!("extent {h}x{w} not divisible by pooling window {window}")));
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                dst[o] = src[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn max_pool2d_backward<T: Real>(dy: &Tensor<T>, arg: &[u32], in_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dy.data()) {
        d[i as usize] += g;
    }
    dx
}

/// One axis of bilinear ×2 resampling: for each output index, the two
/// source taps and their weights.
///
/// Sample position (half-pixel centres, corners not aligned):
/// `src = (dst + 0.5) / 2 - 0.5`, clamped to `[0, len - 1]`;
/// `i0 = floor(src)`, `i1 = min(i0 + 1, len - 1)`, `w1 = src - i0`, `w0 = 1 - w1`.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Bilinear ×2 upsampling (half-pixel centres, see [`bilinear_taps`]).
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            let r0 = &s[y0 * w..(y0 + 1) * w];
            let r1 = &s[y1 * w..(y1 + 1) * w];
            let row = &mut d[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let top = r0[x0] * wx0 + r0[x1] * wx1;
                let bot = r1[x0] * wx0 + r1[x1] * wx1;
                row[ox] = top * wy0 + bot * wy1;
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2x_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let planes = in_shape[0] * in_shape[1];
    let mut dx = Tensor::zeros(in_shape);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..planes {
        let g = &src[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * wy0 * wx0;
                d[y0 * w + x1] += v * wy0 * wx1;
                d[y1 * w + x0] += v * wy1 * wx0;
                d[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    }
    dx
}

/// Batch-normalization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    /// `batch_var` is expected unbiased.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + momentum * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Intermediate values kept from a training-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for the running update.
    pub var_unbiased: Vec<T>,
}

fn check_affine<T>(c: usize, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batch norm over {c} channels got gamma/beta of length {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

pub(crate) fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let [n, c, h, w] = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    let src = x.data();
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += src[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            ss += src[off..off + plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        let var = ss / count;
        mean[ch] = T::from_f64(m);
        inv_std[ch] = T::from_f64(1.0 / (var + eps).sqrt());
        var_unbiased[ch] = T::from_f64(if count > 1.0 { ss / (count - 1.0) } else { var });
    }
    let mut xhat = vec![T::zero(); src.len()];
    let mut out = Tensor::zeros(x.shape());
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + plane {
                let xh = (src[i] - m) * is;
                xhat[i] = xh;
                dst[i] = g * xh + be;
            }
        }
    }
    Ok((out, BnCache { xhat, inv_std, mean, var_unbiased }))
}

pub(crate) fn batchnorm_train_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.dims4_unchecked();
    let plane = h * w;
    let count = (n * plane) as f64;
    let g = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += g[i].as_f64();
                sum_dy_xhat += (g[i] * cache.xhat[i]).as_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        dbeta[ch] = T::from_f64(sum_dy);
        // dx = gamma * inv_std / M * (M*dy - sum(dy) - xhat * sum(dy*xhat))
        let scale = gamma[ch] * cache.inv_std[ch];
        let mean_dy = T::from_f64(sum_dy / count);
        let mean_dy_xhat = T::from_f64(sum_dy_xhat / count);
        let d = dx.data_mut();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                d[i] = scale * (g[i] - mean_dy - cache.xhat[i] * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    check_affine(c, gamma, beta)?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::Shape("running statistics length mismatch".into()));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let is = T::from_f64(1.0 / (stats.var[ch].as_f64() + eps).sqrt());
            let (m, g, be) = (stats.mean[ch], gamma[ch], beta[ch]);
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dst[i] = g * ((src[i] - m) * is) + be;
            }
        }
    }
    Ok(out)
}

pub(crate) fn batchnorm_eval_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &[T],
    stats: &RunningStats<T>,
    eps: f64,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.dims4_unchecked();
    let plane = h * w;
    let g = dy.data();
    let src = x.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Tensor::zeros(dy.shape());
    let d = dx.data_mut();
    for ch in 0..c {
        let is = T::from_f64(1.0 / (stats.var[ch].as_f64() + eps).sqrt());
        let m = stats.mean[ch];
        let (mut sg, mut sb) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sg += (g[i] * (src[i] - m) * is).as_f64();
                sb += g[i].as_f64();
                d[i] = g[i] * gamma[ch] * is;
            }
        }
        dgamma[ch] = T::from_f64(sg);
        dbeta[ch] = T::from_f64(sb);
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization over `(batch, height, width)` per channel.
///
/// Train mode normalizes with biased batch statistics and folds the
/// unbiased batch variance into `stats` with momentum [`BN_MOMENTUM`];
/// eval mode reads `stats` only.
pub fn batchnorm2d<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    mode: Mode,
    stats: &mut RunningStats<T>,
) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::Value("batch norm eps must be positive".into()));
    }
    match mode {
        Mode::Train => {
            let (y, cache) = batchnorm_train(x, gamma, beta, eps)?;
            stats.update(&cache.mean, &cache.var_unbiased, T::from_f64(BN_MOMENTUM));
            Ok(y)
        }
        Mode::Eval => batchnorm_eval(x, gamma, beta, stats, eps),
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Probability clamp applied before the logarithms of [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

fn check_targets<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(bad) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
        return Err(Error::Value(format!("target values must be 0 or 1, found {bad}")));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped into `[eps, 1 - eps]`.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_targets(pred, target)?;
    let (lo, hi) = (BCE_EPS, 1.0 - BCE_EPS);
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(lo, hi);
            if t == T::one() {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(T::from_f64(total / pred.numel() as f64))
}

/// d(bce)/d(pred). Zero where the clamp is active.
pub fn bce_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_targets(pred, target)?;
    let inv_n = 1.0 / pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.as_f64();
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                return T::zero();
            }
            let g = if t == T::one() { -1.0 / p } else { 1.0 / (1.0 - p) };
            T::from_f64(g * inv_n)
        })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}

/// Stacks rank-4 tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let [n, _, h, w] = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?
        .dims4()?;
    let mut total_c = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat extent mismatch: {:?} vs {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        total_c += pc;
    }
    let mut out = Tensor::zeros(&[n, total_c, h, w]);
    for b in 0..n {
        let dst = out.sample_mut(b);
        let mut off = 0;
        for p in parts {
            let src = p.sample(b);
            dst[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into its parts.
pub(crate) fn split_channels<T: Real>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let [n, _, h, w] = dy.dims4_unchecked();
    let mut outs: Vec<Tensor<T>> = channels.iter().map(|&c| Tensor::zeros(&[n, c, h, w])).collect();
    for b in 0..n {
        let src = dy.sample(b);
        let mut off = 0;
        for o in outs.iter_mut() {
            let dst = o.sample_mut(b);
            dst.copy_from_slice(&src[off..off + dst.len()]);
            off += dst.len();
        }
    }
    outs
}

/// Shortcut for a channel-increasing residual connection: spatial
/// subsampling by `stride`, then zero channels appended up to `out_channels`.
pub fn pad_channels<T: Real>(x: &Tensor<T>, out_channels: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if out_channels < c || stride == 0 {
        return Err(Error::Shape(format!("cannot zero-pad {c} channels to {out_channels}")));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    Ok(Tensor::from_fn4([n, out_channels, oh, ow], |b, ch, y, xx| {
        if ch < c {
            x.at4(b, ch, y * stride, xx * stride)
        } else {
            T::zero()
        }
    }))
}

pub(crate) fn pad_channels_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize], stride: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let [n, c, h, w] = dx.dims4_unchecked();
    let [_, oc, oh, ow] = dy.dims4_unchecked();
    let d = dx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    d[((b * c + ch) * h + y * stride) * w + xx * stride] += dy.data()[((b * oc + ch) * oh + y) * ow + xx];
                }
            }
        }
    }
    dx
}

/// `x * alpha` where `alpha` has one channel broadcast over all of `x`'s.
pub fn mul_broadcast<T: Real>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, _, h, w] = x.dims4()?;
    let [an, ac, ah, aw] = alpha.dims4()?;
    if (an, ac, ah, aw) != (n, 1, h, w) {
        return Err(Error::Shape(format!(
            "coefficient map {:?} does not broadcast onto {:?}",
            alpha.shape(),
            x.shape()
        )));
    }
    let plane = h * w;
    let mut out = x.clone();
    for b in 0..n {
        let a = alpha.sample(b);
        for chunk in out.sample_mut(b).chunks_mut(plane) {
            chunk.iter_mut().zip(a).for_each(|(v, &s)| *v *= s);
        }
    }
    Ok(out)
}

pub(crate) fn mul_broadcast_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    alpha: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, _, h, w] = x.dims4_unchecked();
    let plane = h * w;
    let mut dx = dy.clone();
    let mut da = Tensor::zeros(alpha.shape());
    for b in 0..n {
        let a = alpha.sample(b);
        let xs = x.sample(b);
        let gs = dy.sample(b);
        let das = da.sample_mut(b);
        for (ch, chunk) in dx.sample_mut(b).chunks_mut(plane).enumerate() {
            let off = ch * plane;
            for i in 0..plane {
                chunk[i] *= a[i];
                das[i] += gs[off + i] * xs[off + i];
            }
        }
    }
    (dx, da)
}
