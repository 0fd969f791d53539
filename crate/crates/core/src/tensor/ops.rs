//! Pure forward operators. Every function here is deterministic and
//! side-effect free (batchnorm in training mode mutates only the running
//! statistics it is handed), so outputs are bit-identical across runs.

use super::shape::conv_out_dim;
use super::{Act, BatchNormParams, ConvWeights, Result, Shape4, Tensor4, TensorError};

/// 2-D cross-correlation (no kernel flip) with zero padding and channel
/// groups. Output shape (n, c_out, (h+2p-k)/s+1, (w+2p-k)/s+1).
pub fn conv2d(x: &Tensor4, w: &ConvWeights) -> Result<Tensor4> {
    check_conv_input(x, w)?;
    let (n, _, h, wid) = x.shape().dims();
    let h_out = conv_out_dim(h, w.k(), w.padding, w.stride)?;
    let w_out = conv_out_dim(wid, w.k(), w.padding, w.stride)?;
    let out_shape = Shape4::new(n, w.c_out(), h_out, w_out);
    let mut out = vec![0.0; out_shape.len()];
    conv_forward_raw(
        x.data(),
        x.shape(),
        w.kernel.data(),
        w.kernel.shape(),
        w.bias.as_deref(),
        w.stride,
        w.padding,
        w.groups,
        &mut out,
        out_shape,
    );
    Tensor4::from_vec(out_shape, out)
}

/// Depthwise convolution: one kernel per channel, groups == c_in == c_out.
pub fn dwconv2d(x: &Tensor4, w: &ConvWeights) -> Result<Tensor4> {
    let c = x.shape().c;
    if w.groups != c || w.c_out() != c || w.c_in_per_group() != 1 {
        return Err(TensorError::Config(format!(
            "dwconv requires groups == c_in == c_out (got groups={}, c_out={}, c_in_per_group={}, input c={})",
            w.groups,
            w.c_out(),
            w.c_in_per_group(),
            c
        )));
    }
    conv2d(x, w)
}

/// Partial convolution: dense conv over the leading `cp` channels, remaining
/// channels copied through untouched. Spatial dims are preserved, so the
/// kernel must be odd with pad (k-1)/2 and stride 1.
pub fn pconv2d(x: &Tensor4, w: &ConvWeights, cp: usize) -> Result<Tensor4> {
    let (n, c, h, wid) = x.shape().dims();
    if cp < 1 || cp > c {
        return Err(TensorError::Config(format!(
            "pconv cp={} out of range 1..={}",
            cp, c
        )));
    }
    if w.c_out() != cp || w.c_in() != cp || w.groups != 1 {
        return Err(TensorError::Config(format!(
            "pconv weights must map cp={} channels to cp channels ungrouped (got {}->{} groups {})",
            cp,
            w.c_in(),
            w.c_out(),
            w.groups
        )));
    }
    let k = w.k();
    if k % 2 == 0 || w.padding != (k - 1) / 2 || w.stride != 1 {
        return Err(TensorError::Config(format!(
            "pconv must preserve spatial dims: k odd, pad (k-1)/2, stride 1 (got k={}, pad={}, stride={})",
            k, w.padding, w.stride
        )));
    }
    let out_shape = x.shape();
    let mut out = vec![0.0; out_shape.len()];
    // Convolved slice.
    let conv_in_shape = Shape4::new(n, cp, h, wid);
    let conv_out_shape = conv_in_shape;
    let mut conv_in = vec![0.0; conv_in_shape.len()];
    copy_channel_range(x.data(), x.shape(), 0, cp, &mut conv_in);
    let mut conv_out = vec![0.0; conv_out_shape.len()];
    conv_forward_raw(
        &conv_in,
        conv_in_shape,
        w.kernel.data(),
        w.kernel.shape(),
        w.bias.as_deref(),
        1,
        w.padding,
        1,
        &mut conv_out,
        conv_out_shape,
    );
    // Stitch: conv result into channels 0..cp, bit-exact passthrough for the rest.
    let plane = h * wid;
    for ni in 0..n {
        let dst_base = ni * c * plane;
        let src_base = ni * cp * plane;
        out[dst_base..dst_base + cp * plane]
            .copy_from_slice(&conv_out[src_base..src_base + cp * plane]);
        out[dst_base + cp * plane..dst_base + c * plane]
            .copy_from_slice(&x.data()[dst_base + cp * plane..dst_base + c * plane]);
    }
    Tensor4::from_vec(out_shape, out)
}

/// Pointwise (1x1) convolution: pure channel mixing.
pub fn pwconv2d(x: &Tensor4, w: &ConvWeights) -> Result<Tensor4> {
    if w.k() != 1 || w.stride != 1 || w.padding != 0 {
        return Err(TensorError::Config(format!(
            "pwconv requires k=1, stride=1, pad=0 (got k={}, stride={}, pad={})",
            w.k(),
            w.stride,
            w.padding
        )));
    }
    conv2d(x, w)
}

/// Batch normalization over the channel axis. Training mode normalizes by
/// batch statistics (biased variance) and folds them into the running stats
/// via `momentum`; inference mode normalizes by the running stats.
pub fn batchnorm(x: &Tensor4, p: &mut BatchNormParams, training: bool) -> Result<Tensor4> {
    p.validate()?;
    let (n, c, h, w) = x.shape().dims();
    if p.channels() != c {
        return Err(TensorError::DimMismatch {
            axis: "c",
            expected: p.channels(),
            got: c,
        });
    }
    let mut out = vec![0.0; x.shape().len()];
    let plane = h * w;
    let m = (n * plane) as f64;
    for ci in 0..c {
        let (mean, var) = if training {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                for &v in x.plane(ni, ci) {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            p.running_mean[ci] = (1.0 - p.momentum) * p.running_mean[ci] + p.momentum * mean;
            p.running_var[ci] = (1.0 - p.momentum) * p.running_var[ci] + p.momentum * var;
            (mean, var)
        } else {
            (p.running_mean[ci], p.running_var[ci])
        };
        let inv_std = 1.0 / (var + p.eps).sqrt();
        let g = p.gamma[ci];
        let b = p.beta[ci];
        for ni in 0..n {
            let base = x.shape().idx(ni, ci, 0, 0);
            for i in 0..plane {
                out[base + i] = (x.data()[base + i] - mean) * inv_std * g + b;
            }
        }
    }
    Tensor4::from_vec(x.shape(), out)
}

/// Folds inference-mode batch norm into the preceding convolution so that
/// `conv2d(x, fused) == batchnorm(conv2d(x, w), p, false)` for all x.
pub fn fuse_conv_bn(w: &ConvWeights, p: &BatchNormParams, training: bool) -> Result<ConvWeights> {
    if training {
        return Err(TensorError::Config(
            "conv+bn fusion is undefined in training mode".into(),
        ));
    }
    p.validate()?;
    let c_out = w.c_out();
    if p.channels() != c_out {
        return Err(TensorError::DimMismatch {
            axis: "c",
            expected: c_out,
            got: p.channels(),
        });
    }
    let ks = w.kernel.shape();
    let per_out = ks.c * ks.h * ks.w;
    let mut kernel = w.kernel.data().to_vec();
    let mut bias = vec![0.0; c_out];
    for co in 0..c_out {
        let scale = p.gamma[co] / (p.running_var[co] + p.eps).sqrt();
        for v in &mut kernel[co * per_out..(co + 1) * per_out] {
            *v *= scale;
        }
        let b0 = w.bias.as_ref().map_or(0.0, |b| b[co]);
        bias[co] = p.beta[co] + (b0 - p.running_mean[co]) * scale;
    }
    ConvWeights::new(
        Tensor4::from_vec(ks, kernel)?,
        Some(bias),
        w.stride,
        w.padding,
        w.groups,
    )
}

/// Elementwise activation.
pub fn activation(x: &Tensor4, kind: Act) -> Tensor4 {
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    Tensor4::from_vec(x.shape(), data).unwrap()
}

/// Max pooling with window k, stride s, zero-padding p. Padded positions do
/// not participate (the max is over in-bounds elements only).
pub fn maxpool2d(x: &Tensor4, k: usize, s: usize, p: usize) -> Result<Tensor4> {
    let (out, _) = maxpool2d_with_argmax(x, k, s, p)?;
    Ok(out)
}

/// Max pooling that also returns, per output element, the flat input index of
/// the selected maximum (ties resolved to the first in row-major scan order).
pub fn maxpool2d_with_argmax(
    x: &Tensor4,
    k: usize,
    s: usize,
    p: usize,
) -> Result<(Tensor4, Vec<usize>)> {
    if k < 1 || s < 1 {
        return Err(TensorError::Config("pool k and stride must be >= 1".into()));
    }
    if p >= k {
        return Err(TensorError::Config(format!(
            "pool padding {} must be < window {}",
            p, k
        )));
    }
    let (n, c, h, w) = x.shape().dims();
    let h_out = conv_out_dim(h, k, p, s)?;
    let w_out = conv_out_dim(w, k, p, s)?;
    let out_shape = Shape4::new(n, c, h_out, w_out);
    let mut out = vec![0.0; out_shape.len()];
    let mut argmax = vec![0usize; out_shape.len()];
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.plane(ni, ci);
            let base = x.shape().idx(ni, ci, 0, 0);
            for oy in 0..h_out {
                let y0 = (oy * s) as isize - p as isize;
                for ox in 0..w_out {
                    let x0 = (ox * s) as isize - p as isize;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = base + idx;
                            }
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((Tensor4::from_vec(out_shape, out)?, argmax))
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn nearest_upsample2x(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.shape().dims();
    let out_shape = Shape4::new(n, c, h * 2, w * 2);
    let mut out = vec![0.0; out_shape.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = x.row(ni, ci, y);
                for dy in 0..2 {
                    let dst_start = out_shape.idx(ni, ci, y * 2 + dy, 0);
                    let dst = &mut out[dst_start..dst_start + 2 * w];
                    for (xi, &v) in src.iter().enumerate() {
                        dst[2 * xi] = v;
                        dst[2 * xi + 1] = v;
                    }
                }
            }
        }
    }
    Tensor4::from_vec(out_shape, out).unwrap()
}

/// Stacks tensors along the channel axis in argument order. All inputs must
/// share (n, h, w).
pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4> {
    if xs.is_empty() {
        return Err(TensorError::Config("concat of zero tensors".into()));
    }
    let (n, _, h, w) = xs[0].shape().dims();
    for t in xs {
        let s = t.shape();
        if s.n != n {
            return Err(TensorError::DimMismatch {
                axis: "n",
                expected: n,
                got: s.n,
            });
        }
        if s.h != h {
            return Err(TensorError::DimMismatch {
                axis: "h",
                expected: h,
                got: s.h,
            });
        }
        if s.w != w {
            return Err(TensorError::DimMismatch {
                axis: "w",
                expected: w,
                got: s.w,
            });
        }
    }
    let c_total: usize = xs.iter().map(|t| t.shape().c).sum();
    let out_shape = Shape4::new(n, c_total, h, w);
    let mut out = vec![0.0; out_shape.len()];
    let plane = h * w;
    for ni in 0..n {
        let mut c_off = 0;
        for t in xs {
            let c = t.shape().c;
            let src = &t.data()[ni * c * plane..(ni + 1) * c * plane];
            let dst_start = out_shape.idx(ni, c_off, 0, 0);
            out[dst_start..dst_start + c * plane].copy_from_slice(src);
            c_off += c;
        }
    }
    Tensor4::from_vec(out_shape, out)
}

/// Extracts channels c0..c1 as a new tensor.
pub fn slice_channels(x: &Tensor4, c0: usize, c1: usize) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape().dims();
    if c0 >= c1 || c1 > c {
        return Err(TensorError::Config(format!(
            "channel slice {}..{} out of range for c={}",
            c0, c1, c
        )));
    }
    let out_shape = Shape4::new(n, c1 - c0, h, w);
    let mut out = vec![0.0; out_shape.len()];
    copy_channel_range_offset(x.data(), x.shape(), c0, c1, &mut out);
    Tensor4::from_vec(out_shape, out)
}

fn copy_channel_range(src: &[f64], shape: Shape4, c0: usize, c1: usize, dst: &mut [f64]) {
    copy_channel_range_offset(src, shape, c0, c1, dst);
}

fn copy_channel_range_offset(src: &[f64], shape: Shape4, c0: usize, c1: usize, dst: &mut [f64]) {
    let (n, _, h, w) = shape.dims();
    let plane = h * w;
    let cs = c1 - c0;
    for ni in 0..n {
        let s0 = shape.idx(ni, c0, 0, 0);
        dst[ni * cs * plane..(ni + 1) * cs * plane].copy_from_slice(&src[s0..s0 + cs * plane]);
    }
}

fn check_conv_input(x: &Tensor4, w: &ConvWeights) -> Result<()> {
    if x.shape().c != w.c_in() {
        return Err(TensorError::DimMismatch {
            axis: "c",
            expected: w.c_in(),
            got: x.shape().c,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared raw kernels. The tape reuses these for its forward pass and the
// backward helpers below for its VJPs.
// ---------------------------------------------------------------------------

/// Accumulating conv forward over raw buffers. `out` must be zeroed (bias is
/// written by this function).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_raw(
    x: &[f64],
    x_shape: Shape4,
    kernel: &[f64],
    k_shape: Shape4,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
    out: &mut [f64],
    out_shape: Shape4,
) {
    let (n, _c_in, h, w) = x_shape.dims();
    let (c_out, c_in_pg, k, _) = k_shape.dims();
    let (h_out, w_out) = out_shape.spatial();
    let c_out_pg = c_out / groups;
    for ni in 0..n {
        for co in 0..c_out {
            let g = co / c_out_pg;
            let ci0 = g * c_in_pg;
            let b = bias.map_or(0.0, |b| b[co]);
            for oy in 0..h_out {
                let row_start = out_shape.idx(ni, co, oy, 0);
                let out_row = &mut out[row_start..row_start + w_out];
                if b != 0.0 {
                    for v in out_row.iter_mut() {
                        *v += b;
                    }
                }
                for ci_g in 0..c_in_pg {
                    let ci = ci0 + ci_g;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_start = x_shape.idx(ni, ci, iy as usize, 0);
                        let x_row = &x[x_start..x_start + w];
                        let w_start = k_shape.idx(co, ci_g, ky, 0);
                        let w_row = &kernel[w_start..w_start + k];
                        if stride == 1 {
                            conv_row_s1(x_row, w_row, padding, out_row);
                        } else {
                            conv_row_strided(x_row, w_row, padding, stride, out_row);
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 inner row accumulation, branch-free over the valid range of each
/// kernel tap so LLVM can vectorize.
#[inline]
fn conv_row_s1(x_row: &[f64], w_row: &[f64], padding: usize, out_row: &mut [f64]) {
    let w_in = x_row.len();
    let w_out = out_row.len();
    for (kx, &wv) in w_row.iter().enumerate() {
        if wv == 0.0 {
            continue;
        }
        // ix = ox + kx - padding must lie in [0, w_in)
        let lo = padding.saturating_sub(kx);
        let hi = (w_in + padding).saturating_sub(kx).min(w_out);
        if lo >= hi {
            continue;
        }
        let shift = kx as isize - padding as isize;
        let xs = &x_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
        for (o, &xv) in out_row[lo..hi].iter_mut().zip(xs) {
            *o += wv * xv;
        }
    }
}

#[inline]
fn conv_row_strided(x_row: &[f64], w_row: &[f64], padding: usize, stride: usize, out_row: &mut [f64]) {
    let w_in = x_row.len() as isize;
    for (ox, o) in out_row.iter_mut().enumerate() {
        let x0 = (ox * stride) as isize - padding as isize;
        let mut acc = 0.0;
        for (kx, &wv) in w_row.iter().enumerate() {
            let ix = x0 + kx as isize;
            if ix >= 0 && ix < w_in {
                acc += wv * x_row[ix as usize];
            }
        }
        *o += acc;
    }
}

/// Conv VJP: given dL/dout, accumulates dL/dx, dL/dkernel, dL/dbias into the
/// provided buffers (which the caller pre-zeros or pre-accumulates).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_raw(
    x: &[f64],
    x_shape: Shape4,
    kernel: &[f64],
    k_shape: Shape4,
    stride: usize,
    padding: usize,
    groups: usize,
    grad_out: &[f64],
    out_shape: Shape4,
    dx: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let (n, _c_in, h, w) = x_shape.dims();
    let (c_out, c_in_pg, k, _) = k_shape.dims();
    let (h_out, w_out) = out_shape.spatial();
    let c_out_pg = c_out / groups;
    let mut dx = dx;
    let mut dkernel = dkernel;
    let mut dbias = dbias;
    for ni in 0..n {
        for co in 0..c_out {
            let g = co / c_out_pg;
            let ci0 = g * c_in_pg;
            for oy in 0..h_out {
                let go_start = out_shape.idx(ni, co, oy, 0);
                let go_row = &grad_out[go_start..go_start + w_out];
                if let Some(db) = dbias.as_deref_mut() {
                    db[co] += go_row.iter().sum::<f64>();
                }
                for ci_g in 0..c_in_pg {
                    let ci = ci0 + ci_g;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_start = x_shape.idx(ni, ci, iy as usize, 0);
                        let w_start = k_shape.idx(co, ci_g, ky, 0);
                        if stride == 1 {
                            for kx in 0..k {
                                let lo = padding.saturating_sub(kx);
                                let hi = (w + padding).saturating_sub(kx).min(w_out);
                                if lo >= hi {
                                    continue;
                                }
                                let shift = kx as isize - padding as isize;
                                let xlo = (lo as isize + shift) as usize;
                                let xhi = (hi as isize + shift) as usize;
                                if let Some(dk) = dkernel.as_deref_mut() {
                                    let mut acc = 0.0;
                                    for (&g, &xv) in
                                        go_row[lo..hi].iter().zip(&x[x_start + xlo..x_start + xhi])
                                    {
                                        acc += g * xv;
                                    }
                                    dk[w_start + kx] += acc;
                                }
                                if let Some(dxb) = dx.as_deref_mut() {
                                    let wv = kernel[w_start + kx];
                                    if wv != 0.0 {
                                        for (dst, &g) in dxb[x_start + xlo..x_start + xhi]
                                            .iter_mut()
                                            .zip(&go_row[lo..hi])
                                        {
                                            *dst += wv * g;
                                        }
                                    }
                                }
                            }
                        } else {
                            for ox in 0..w_out {
                                let go = go_row[ox];
                                if go == 0.0 {
                                    continue;
                                }
                                let x0 = (ox * stride) as isize - padding as isize;
                                for kx in 0..k {
                                    let ix = x0 + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    if let Some(dk) = dkernel.as_deref_mut() {
                                        dk[w_start + kx] += go * x[x_start + ix as usize];
                                    }
                                    if let Some(dxb) = dx.as_deref_mut() {
                                        dxb[x_start + ix as usize] += kernel[w_start + kx] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
