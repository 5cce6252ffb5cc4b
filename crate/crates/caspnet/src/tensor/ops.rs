//! Forward and backward kernels for the tensor ops.
//!
//! Convolutions are lowered to im2col + small GEMM loops. The GEMM loops are
//! written in accumulate-into-row (axpy) or eight-lane dot form so the
//! optimizer can vectorize them; on one core this is what makes full-size
//! training runs feasible.

use super::{Element, GridTensor};
use crate::error::{Error, Result};

/// Normalization mode: `Train` uses statistics of the current sample,
/// `Eval` uses the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// GEMM helpers
// ---------------------------------------------------------------------------

const COL_BLOCK: usize = 256;

/// c (m x n) += a (m x k) * b (k x n)
pub(crate) fn matmul_nn<T: Element>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut jb = 0;
    while jb < n {
        let nb = COL_BLOCK.min(n - jb);
        for i in 0..m {
            let c_row = &mut c[i * n + jb..i * n + jb + nb];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b[p * n + jb..p * n + jb + nb];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + a_ip * bv;
                }
            }
        }
        jb += COL_BLOCK;
    }
}

/// c (k x n) += a (m x k)^T * b (m x n)
pub(crate) fn matmul_tn<T: Element>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut jb = 0;
    while jb < n {
        let nb = COL_BLOCK.min(n - jb);
        for i in 0..m {
            let b_row = &b[i * n + jb..i * n + jb + nb];
            for l in 0..k {
                let a_il = a[i * k + l];
                let c_row = &mut c[l * n + jb..l * n + jb + nb];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + a_il * bv;
                }
            }
        }
        jb += COL_BLOCK;
    }
}

/// Eight independent accumulator lanes so the reduction vectorizes.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [T::zero(); 8];
    for c in 0..chunks {
        let ao = &a[c * 8..c * 8 + 8];
        let bo = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + ao[l] * bo[l];
        }
    }
    let mut s = T::zero();
    for l in 0..8 {
        s = s + acc[l];
    }
    for j in chunks * 8..n {
        s = s + a[j] * b[j];
    }
    s
}

/// c (m x k) += a (m x n) * b (k x n)^T
pub(crate) fn matmul_nt<T: Element>(a: &[T], m: usize, n: usize, b: &[T], k: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            c[i * k + l] = c[i * k + l] + dot(a_row, b_row);
        }
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: (usize, usize),
        dilation: usize,
    ) -> Result<ConvGeom> {
        if stride == 0 || dilation == 0 {
            return Err(Error::config("conv stride and dilation must be >= 1"));
        }
        let eff_h = (kh - 1) * dilation + 1;
        let eff_w = (kw - 1) * dilation + 1;
        if h + 2 * pad.0 < eff_h || w + 2 * pad.1 < eff_w {
            return Err(Error::shape(format!(
                "conv kernel {kh}x{kw} (dilation {dilation}) larger than padded input {}x{}",
                h + 2 * pad.0,
                w + 2 * pad.1
            )));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad_h: pad.0,
            pad_w: pad.1,
            dilation,
            out_h: (h + 2 * pad.0 - eff_h) / stride + 1,
            out_w: (w + 2 * pad.1 - eff_w) / stride + 1,
        })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Lower input patches into a (c_in*kh*kw) x (out_h*out_w) matrix.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let rows = g.patch_rows();
    let cols = g.out_positions();
    let mut out = vec![T::zero(); rows * cols];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad_h as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let dst_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if g.stride == 1 {
                        // contiguous copy of the valid range
                        let iw0 = kj as isize * g.dilation as isize - g.pad_w as isize;
                        let lo = (-iw0).max(0) as usize;
                        let hi = ((g.w as isize - iw0).max(0) as usize).min(g.out_w);
                        if lo < hi {
                            let s0 = (iw0 + lo as isize) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                        }
                    } else {
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj * g.dilation) as isize - g.pad_w as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into an input-shaped buffer.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n_cols = g.out_positions();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad_h as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src_row = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = (ow * g.stride + kj * g.dilation) as isize - g.pad_w as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn conv_geom_for<T: Element>(
    x: &GridTensor<T>,
    w: &GridTensor<T>,
    stride: usize,
    pad: (usize, usize),
    dilation: usize,
) -> Result<ConvGeom> {
    let (c_in, h, width) = x.dims3()?;
    let (_, wc_in, kh, kw) = w.dims4()?;
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv kernel expects {wc_in} input channels, input has {c_in}"
        )));
    }
    ConvGeom::new(c_in, h, width, kh, kw, stride, pad, dilation)
}

/// 2-D cross-correlation over a `(c_in, h, w)` input with a
/// `(c_out, c_in, kh, kw)` kernel.
pub fn conv2d<T: Element>(
    x: &GridTensor<T>,
    w: &GridTensor<T>,
    bias: Option<&GridTensor<T>>,
    stride: usize,
    pad: (usize, usize),
    dilation: usize,
) -> Result<GridTensor<T>> {
    let g = conv_geom_for(x, w, stride, pad, dilation)?;
    let c_out = w.shape()[0];
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::shape(format!(
                "conv bias has {} elements, kernel has {} output channels",
                b.numel(),
                c_out
            )));
        }
    }
    let cols = im2col(x.data(), &g);
    let n = g.out_positions();
    let mut out = vec![T::zero(); c_out * n];
    matmul_nn(w.data(), c_out, g.patch_rows(), &cols, n, &mut out);
    if let Some(b) = bias {
        for co in 0..c_out {
            let bv = b.data()[co];
            for v in &mut out[co * n..(co + 1) * n] {
                *v = *v + bv;
            }
        }
    }
    GridTensor::new(vec![c_out, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
pub(crate) fn conv2d_backward<T: Element>(
    x: &GridTensor<T>,
    w: &GridTensor<T>,
    d_out: &GridTensor<T>,
    has_bias: bool,
    stride: usize,
    pad: (usize, usize),
    dilation: usize,
) -> Result<(GridTensor<T>, GridTensor<T>, Option<GridTensor<T>>)> {
    let g = conv_geom_for(x, w, stride, pad, dilation)?;
    let c_out = w.shape()[0];
    let n = g.out_positions();
    let rows = g.patch_rows();

    // d_bias
    let d_bias = if has_bias {
        let mut db = vec![T::zero(); c_out];
        for co in 0..c_out {
            let mut s = T::zero();
            for &v in &d_out.data()[co * n..(co + 1) * n] {
                s = s + v;
            }
            db[co] = s;
        }
        Some(GridTensor::new(vec![c_out], db)?)
    } else {
        None
    };

    // d_w = d_out (c_out x n) * patches^T (n x rows)
    let cols = im2col(x.data(), &g);
    let mut dw = vec![T::zero(); c_out * rows];
    matmul_nt(d_out.data(), c_out, n, &cols, rows, &mut dw);
    drop(cols);

    // d_x = col2im(w^T (rows x c_out) * d_out (c_out x n))
    let mut d_cols = vec![T::zero(); rows * n];
    matmul_tn(w.data(), c_out, rows, d_out.data(), n, &mut d_cols);
    let dx = col2im(&d_cols, &g);

    Ok((
        GridTensor::new(x.shape().to_vec(), dx)?,
        GridTensor::new(w.shape().to_vec(), dw)?,
        d_bias,
    ))
}

// ---------------------------------------------------------------------------
// conv_transpose2d
// ---------------------------------------------------------------------------

fn convt_geom_for<T: Element>(
    x: &GridTensor<T>,
    w: &GridTensor<T>,
    stride: usize,
    pad: (usize, usize),
) -> Result<(ConvGeom, usize)> {
    let (c_in, h, width) = x.dims3()?;
    let (wc_in, c_out, kh, kw) = w.dims4()?;
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "transpose conv kernel expects {wc_in} input channels, input has {c_in}"
        )));
    }
    let out_h = (h - 1) * stride + kh;
    let out_w = (width - 1) * stride + kw;
    if out_h < 2 * pad.0 + 1 || out_w < 2 * pad.1 + 1 {
        return Err(Error::shape(format!(
            "transpose conv output {out_h}x{out_w} smaller than 2*padding"
        )));
    }
    // Geometry of the adjoint convolution (output -> input).
    let g = ConvGeom::new(
        c_out,
        out_h - 2 * pad.0,
        out_w - 2 * pad.1,
        kh,
        kw,
        stride,
        pad,
        1,
    )?;
    debug_assert_eq!(g.out_h, h);
    debug_assert_eq!(g.out_w, width);
    Ok((g, c_in))
}

/// Transposed convolution (adjoint of [`conv2d`] with the same geometry).
/// Kernel layout is `(c_in, c_out, kh, kw)`; output extents are
/// `(h - 1) * stride + kh - 2 * pad`.
pub fn conv_transpose2d<T: Element>(
    x: &GridTensor<T>,
    w: &GridTensor<T>,
    bias: Option<&GridTensor<T>>,
    stride: usize,
    pad: (usize, usize),
) -> Result<GridTensor<T>> {
    let (g, c_in) = convt_geom_for(x, w, stride, pad)?;
    let c_out = w.shape()[1];
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::shape(format!(
                "transpose conv bias has {} elements, kernel has {} output channels",
                b.numel(),
                c_out
            )));
        }
    }
    let n = x.shape()[1] * x.shape()[2];
    let rows = g.patch_rows(); // c_out * kh * kw
    let mut cols = vec![T::zero(); rows * n];
    matmul_tn(w.data(), c_in, rows, x.data(), n, &mut cols);
    let mut out = col2im(&cols, &g);
    if let Some(b) = bias {
        let plane = g.h * g.w;
        for co in 0..c_out {
            let bv = b.data()[co];
            for v in &mut out[co * plane..(co + 1) * plane] {
                *v = *v + bv;
            }
        }
    }
    GridTensor::new(vec![c_out, g.h, g.w], out)
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &GridTensor<T>,
    w: &GridTensor<T>,
    d_out: &GridTensor<T>,
    has_bias: bool,
    stride: usize,
    pad: (usize, usize),
) -> Result<(GridTensor<T>, GridTensor<T>, Option<GridTensor<T>>)> {
    let (g, c_in) = convt_geom_for(x, w, stride, pad)?;
    let c_out = w.shape()[1];
    let plane = g.h * g.w;

    let d_bias = if has_bias {
        let mut db = vec![T::zero(); c_out];
        for co in 0..c_out {
            let mut s = T::zero();
            for &v in &d_out.data()[co * plane..(co + 1) * plane] {
                s = s + v;
            }
            db[co] = s;
        }
        Some(GridTensor::new(vec![c_out], db)?)
    } else {
        None
    };

    // d_x is a plain convolution of d_out with the same kernel.
    let cols = im2col(d_out.data(), &g);
    let n = g.out_positions(); // == h * w of x
    let rows = g.patch_rows();
    let mut dx = vec![T::zero(); c_in * n];
    matmul_nn(w.data(), c_in, rows, &cols, n, &mut dx);

    // d_w = x (c_in x n) * im2col(d_out)^T (n x rows)
    let mut dw = vec![T::zero(); c_in * rows];
    matmul_nt(x.data(), c_in, n, &cols, rows, &mut dw);

    Ok((
        GridTensor::new(x.shape().to_vec(), dx)?,
        GridTensor::new(w.shape().to_vec(), dw)?,
        d_bias,
    ))
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

/// Per-window maximum with argmax routing. Windows must tile the input
/// exactly (`(h - k)` and `(w - k)` divisible by `stride`).
pub fn max_pool2d<T: Element>(
    x: &GridTensor<T>,
    k: usize,
    stride: usize,
) -> Result<(GridTensor<T>, Vec<u32>)> {
    let (c, h, w) = x.dims3()?;
    if k == 0 || stride == 0 {
        return Err(Error::config("pool size and stride must be >= 1"));
    }
    if h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0 {
        return Err(Error::shape(format!(
            "pool {k}x{k} stride {stride} does not tile {h}x{w} input"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![T::zero(); c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for di in 0..k {
                    let row = (i * stride + di) * w + j * stride;
                    for dj in 0..k {
                        let v = plane[row + dj];
                        if v > best {
                            best = v;
                            best_idx = row + dj;
                        }
                    }
                }
                out[(ci * oh + i) * ow + j] = best;
                arg[(ci * oh + i) * ow + j] = (ci * h * w + best_idx) as u32;
            }
        }
    }
    Ok((GridTensor::new(vec![c, oh, ow], out)?, arg))
}

pub(crate) fn max_pool2d_backward<T: Element>(
    in_shape: &[usize],
    argmax: &[u32],
    d_out: &GridTensor<T>,
) -> GridTensor<T> {
    let mut dx = GridTensor::zeros(in_shape);
    let data = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        data[idx as usize] = data[idx as usize] + g;
    }
    dx
}

// ---------------------------------------------------------------------------
// batch norm (single-sample, per-channel spatial statistics)
// ---------------------------------------------------------------------------

pub(crate) struct BnForward<T: Element> {
    pub out: GridTensor<T>,
    /// statistics actually used for normalization
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn bn_forward<T: Element>(
    x: &GridTensor<T>,
    gamma: &GridTensor<T>,
    beta: &GridTensor<T>,
    running_mean: &GridTensor<T>,
    running_var: &GridTensor<T>,
    mode: NormMode,
    eps: T,
) -> Result<BnForward<T>> {
    let (c, h, w) = x.dims3()?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", running_mean),
        ("running var", running_var),
    ] {
        if t.numel() != c {
            return Err(Error::shape(format!(
                "batch norm {name} has {} elements, input has {c} channels",
                t.numel()
            )));
        }
    }
    let plane = h * w;
    let inv_n = T::from_f64(1.0 / plane as f64);
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let xs = &x.data()[ci * plane..(ci + 1) * plane];
                let mut s = T::zero();
                for &v in xs {
                    s = s + v;
                }
                let m = s * inv_n;
                let mut sq = T::zero();
                for &v in xs {
                    let d = v - m;
                    sq = sq + d * d;
                }
                mean[ci] = m;
                var[ci] = sq * inv_n;
            }
            (mean, var)
        }
        NormMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let mut out = vec![T::zero(); c * plane];
    for ci in 0..c {
        let inv_std = T::one() / (var[ci] + eps).sqrt();
        let g = gamma.data()[ci];
        let b = beta.data()[ci];
        let m = mean[ci];
        let xs = &x.data()[ci * plane..(ci + 1) * plane];
        let os = &mut out[ci * plane..(ci + 1) * plane];
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = g * (v - m) * inv_std + b;
        }
    }
    Ok(BnForward {
        out: GridTensor::new(x.shape().to_vec(), out)?,
        mean,
        var,
    })
}

/// Normalize per channel over the spatial extent of the single sample.
/// `Train` mode uses current statistics and folds them into the running
/// estimates with the given momentum; `Eval` normalizes with the running
/// estimates unchanged.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Element>(
    x: &GridTensor<T>,
    gamma: &GridTensor<T>,
    beta: &GridTensor<T>,
    running_mean: &mut GridTensor<T>,
    running_var: &mut GridTensor<T>,
    mode: NormMode,
    momentum: T,
    eps: T,
) -> Result<GridTensor<T>> {
    let fwd = bn_forward(x, gamma, beta, running_mean, running_var, mode, eps)?;
    if mode == NormMode::Train {
        let keep = T::one() - momentum;
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&fwd.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&fwd.var) {
            *r = keep * *r + momentum * b;
        }
    }
    Ok(fwd.out)
}

/// Backward pass. When `stats_from_batch` the statistics are functions of
/// the input (train mode); otherwise they are constants (eval mode).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<T: Element>(
    x: &GridTensor<T>,
    gamma: &GridTensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
    stats_from_batch: bool,
    d_out: &GridTensor<T>,
) -> (GridTensor<T>, GridTensor<T>, GridTensor<T>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let inv_n = T::from_f64(1.0 / plane as f64);
    let mut dx = vec![T::zero(); c * plane];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let inv_std = T::one() / (var[ci] + eps).sqrt();
        let m = mean[ci];
        let g = gamma.data()[ci];
        let xs = &x.data()[ci * plane..(ci + 1) * plane];
        let dys = &d_out.data()[ci * plane..(ci + 1) * plane];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&xv, &dy) in xs.iter().zip(dys) {
            let xhat = (xv - m) * inv_std;
            sum_dy = sum_dy + dy;
            sum_dy_xhat = sum_dy_xhat + dy * xhat;
        }
        dbeta[ci] = sum_dy;
        dgamma[ci] = sum_dy_xhat;
        let dxs = &mut dx[ci * plane..(ci + 1) * plane];
        if stats_from_batch {
            let mean_dy = sum_dy * inv_n;
            let mean_dy_xhat = sum_dy_xhat * inv_n;
            for ((d, &xv), &dy) in dxs.iter_mut().zip(xs).zip(dys) {
                let xhat = (xv - m) * inv_std;
                *d = g * inv_std * (dy - mean_dy - xhat * mean_dy_xhat);
            }
        } else {
            for (d, &dy) in dxs.iter_mut().zip(dys) {
                *d = g * inv_std * dy;
            }
        }
    }
    (
        GridTensor::new(x.shape().to_vec(), dx).unwrap(),
        GridTensor::new(vec![c], dgamma).unwrap(),
        GridTensor::new(vec![c], dbeta).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// softmax over channels
// ---------------------------------------------------------------------------

/// Per-pixel softmax across the channel dimension of a `(c, h, w)` tensor,
/// with max subtraction for numeric stability.
pub fn softmax_channels<T: Element>(x: &GridTensor<T>) -> Result<GridTensor<T>> {
    let (c, h, w) = x.dims3()?;
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for p in 0..plane {
        let mut m = T::neg_infinity();
        for ci in 0..c {
            m = m.max(x.data()[ci * plane + p]);
        }
        let mut s = T::zero();
        for ci in 0..c {
            let e = (x.data()[ci * plane + p] - m).exp();
            out[ci * plane + p] = e;
            s = s + e;
        }
        let inv = T::one() / s;
        for ci in 0..c {
            out[ci * plane + p] = out[ci * plane + p] * inv;
        }
    }
    GridTensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_channels_backward<T: Element>(
    y: &GridTensor<T>,
    d_out: &GridTensor<T>,
) -> GridTensor<T> {
    let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let plane = h * w;
    let mut dx = vec![T::zero(); c * plane];
    for p in 0..plane {
        let mut dot = T::zero();
        for ci in 0..c {
            dot = dot + d_out.data()[ci * plane + p] * y.data()[ci * plane + p];
        }
        for ci in 0..c {
            let yv = y.data()[ci * plane + p];
            dx[ci * plane + p] = yv * (d_out.data()[ci * plane + p] - dot);
        }
    }
    GridTensor::new(y.shape().to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// bilinear 2x upsampling (align_corners = false)
// ---------------------------------------------------------------------------

/// Index pairs and blend weight for one output axis position.
fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (in_len - 1) as f64 {
                (in_len - 1, in_len - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

/// Double both spatial extents with bilinear interpolation
/// (half-pixel-centered sampling, edges clamped).
pub fn bilinear_upsample2x<T: Element>(x: &GridTensor<T>) -> Result<GridTensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h * 2, w * 2);
    let hs = bilinear_axis(oh, h);
    let ws = bilinear_axis(ow, w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for (i, &(i0, i1, fi)) in hs.iter().enumerate() {
            let fi = T::from_f64(fi);
            let r0 = &plane[i0 * w..(i0 + 1) * w];
            let r1 = &plane[i1 * w..(i1 + 1) * w];
            let dst = &mut out[(ci * oh + i) * ow..(ci * oh + i + 1) * ow];
            for (j, &(j0, j1, fj)) in ws.iter().enumerate() {
                let fj = T::from_f64(fj);
                let top = r0[j0] * (T::one() - fj) + r0[j1] * fj;
                let bot = r1[j0] * (T::one() - fj) + r1[j1] * fj;
                dst[j] = top * (T::one() - fi) + bot * fi;
            }
        }
    }
    GridTensor::new(vec![c, oh, ow], out)
}

pub(crate) fn bilinear_upsample2x_backward<T: Element>(
    in_shape: &[usize],
    d_out: &GridTensor<T>,
) -> GridTensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h * 2, w * 2);
    let hs = bilinear_axis(oh, h);
    let ws = bilinear_axis(ow, w);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (i, &(i0, i1, fi)) in hs.iter().enumerate() {
            let fi = T::from_f64(fi);
            let src = &d_out.data()[(ci * oh + i) * ow..(ci * oh + i + 1) * ow];
            for (j, &(j0, j1, fj)) in ws.iter().enumerate() {
                let fj = T::from_f64(fj);
                let g = src[j];
                plane[i0 * w + j0] =
                    plane[i0 * w + j0] + g * (T::one() - fi) * (T::one() - fj);
                plane[i0 * w + j1] = plane[i0 * w + j1] + g * (T::one() - fi) * fj;
                plane[i1 * w + j0] = plane[i1 * w + j0] + g * fi * (T::one() - fj);
                plane[i1 * w + j1] = plane[i1 * w + j1] + g * fi * fj;
            }
        }
    }
    GridTensor::new(in_shape.to_vec(), dx).unwrap()
}
