//! Forward and backward kernels for the layer types the hybrid networks use.
//!
//! Spatial ops accept a single sample `[C, H, W]` or a batch `[B, C, H, W]`
//! and return the same rank they were given.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Gradients of one layer with respect to its weights and its input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_weights: Tensor,
    pub d_input: Tensor,
    pub d_bias: Option<Tensor>,
}

/// `(batch, channels, height, width)` of a rank-3 or rank-4 tensor.
pub(crate) fn nchw(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(
            "rank",
            format!("expected [C,H,W] or [B,C,H,W], got {:?}", t.shape()),
        )),
    }
}

fn with_batch_rank(like: &Tensor, b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.rank() == 3 {
        vec![c, h, w]
    } else {
        vec![b, c, h, w]
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Half-open range of output positions whose tap `kk` lands inside `[0, input)`.
#[inline]
fn valid_range(input: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (kk, stride, pad, input) = (kk as isize, stride as isize, pad as isize, input as isize);
    // o*stride + kk - pad >= 0
    let lo = if pad - kk > 0 {
        (pad - kk + stride - 1) / stride
    } else {
        0
    };
    // o*stride + kk - pad <= input - 1
    let top = input - 1 + pad - kk;
    let hi = if top < 0 { 0 } else { top / stride + 1 };
    let hi = hi.min(out as isize);
    (lo as usize, hi.max(lo) as usize)
}

struct ConvGeom {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (b, c_in, h, w) = nchw(input)?;
    let [c_out, wc_in, kh, kw] = *weights.shape() else {
        return Err(Error::dim(
            "weights",
            format!("expected [C_out,C_in,k,k], got {:?}", weights.shape()),
        ));
    };
    if wc_in != c_in {
        return Err(Error::dim(
            "channels",
            format!("input has {c_in} channels, weights expect {wc_in}"),
        ));
    }
    if kh != kw {
        return Err(Error::dim("kernel", format!("non-square kernel {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::dim("stride", "stride must be at least 1"));
    }
    if kh > h + 2 * pad {
        return Err(Error::dim("height", format!("kernel {kh} exceeds padded height {}", h + 2 * pad)));
    }
    if kw > w + 2 * pad {
        return Err(Error::dim("width", format!("kernel {kw} exceeds padded width {}", w + 2 * pad)));
    }
    Ok(ConvGeom {
        b,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        ho: conv_out_dim(h, kh, stride, pad),
        wo: conv_out_dim(w, kw, stride, pad),
        stride,
        pad,
    })
}

/// Row-major `c = a * b + beta * c` with `a: [m, k]`, optionally transposed
/// operands given by their strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides address only elements of `a` ([m, k]), `b` ([k, n])
    // and `c` ([m, n], row-major), whose lengths the callers size exactly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one sample `[C_in, H, W]` into columns `[C_in * k * k, Ho * Wo]`.
fn im2col(g: &ConvGeom, plane: &[f32], col: &mut [f32]) {
    let cols = g.ho * g.wo;
    for ci in 0..g.c_in {
        let in_plane = &plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h, g.ho, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w, g.wo, kx, g.stride, g.pad);
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * cols..][..cols];
                row.fill(0.0);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let irow = &in_plane[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        orow[ox] = irow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C_in, H, W]`.
fn col2im(g: &ConvGeom, col: &[f32], plane: &mut [f32]) {
    let cols = g.ho * g.wo;
    for ci in 0..g.c_in {
        let d_plane = &mut plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h, g.ho, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w, g.wo, kx, g.stride, g.pad);
                let row = &col[((ci * g.k + ky) * g.k + kx) * cols..][..cols];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut d_plane[iy * g.w..(iy + 1) * g.w];
                    let grow = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        drow[ox * g.stride + kx - g.pad] += grow[ox];
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(input, weights, stride, pad)?;
    let (plane_in, plane_out) = (g.c_in * g.h * g.w, g.ho * g.wo);
    let kdim = g.c_in * g.k * g.k;
    let mut out = vec![0f32; g.b * g.c_out * plane_out];
    let mut col = vec![0f32; kdim * plane_out];
    for b in 0..g.b {
        im2col(&g, &input.data()[b * plane_in..(b + 1) * plane_in], &mut col);
        let o = &mut out[b * g.c_out * plane_out..(b + 1) * g.c_out * plane_out];
        gemm(
            g.c_out,
            kdim,
            plane_out,
            weights.data(),
            (kdim as isize, 1),
            &col,
            (plane_out as isize, 1),
            0.0,
            o,
        );
    }
    Tensor::new(&with_batch_rank(input, g.b, g.c_out, g.ho, g.wo), out)
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<LayerGrad> {
    let g = conv_geom(input, weights, stride, pad)?;
    upstream.expect_shape(
        &with_batch_rank(input, g.b, g.c_out, g.ho, g.wo),
        "conv upstream",
    )?;
    let (plane_in, plane_out) = (g.c_in * g.h * g.w, g.ho * g.wo);
    let kdim = g.c_in * g.k * g.k;
    let mut d_in = vec![0f32; input.numel()];
    let mut d_w = vec![0f32; weights.numel()];
    let mut col = vec![0f32; kdim * plane_out];
    let mut d_col = vec![0f32; kdim * plane_out];
    for b in 0..g.b {
        let up = &upstream.data()[b * g.c_out * plane_out..(b + 1) * g.c_out * plane_out];
        im2col(&g, &input.data()[b * plane_in..(b + 1) * plane_in], &mut col);
        // dW += up [C_out, P] * col^T [P, kdim]
        gemm(
            g.c_out,
            plane_out,
            kdim,
            up,
            (plane_out as isize, 1),
            &col,
            (1, plane_out as isize),
            1.0,
            &mut d_w,
        );
        // dcol = W^T [kdim, C_out] * up [C_out, P]
        gemm(
            kdim,
            g.c_out,
            plane_out,
            weights.data(),
            (1, kdim as isize),
            up,
            (plane_out as isize, 1),
            0.0,
            &mut d_col,
        );
        col2im(&g, &d_col, &mut d_in[b * plane_in..(b + 1) * plane_in]);
    }
    Ok(LayerGrad {
        d_weights: Tensor::new(weights.shape(), d_w)?,
        d_input: Tensor::new(input.shape(), d_in)?,
        d_bias: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

/// What batch-norm backward needs from its forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub mode: BnMode,
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// updates `running` with momentum [`BN_MOMENTUM`]; eval mode uses `running`.
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    mode: BnMode,
) -> Result<Tensor> {
    batchnorm_forward(input, gamma, beta, running, mode).map(|(y, _)| y)
}

pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let (b, c, h, w) = check_bn(input, gamma, beta, running)?;
    if mode == BnMode::Eval {
        return batchnorm_infer(input, gamma, beta, running);
    }
    let plane = h * w;
    let count = b * plane;
    let x = input.data();
    let mut means = vec![0f32; c];
    let mut vars = vec![0f32; c];
    for ch in 0..c {
        let mut sum = 0f64;
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            sum += x[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0f64;
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            sq += x[off..off + plane]
                .iter()
                .map(|&v| (v as f64 - m) * (v as f64 - m))
                .sum::<f64>();
        }
        let biased = sq / count as f64;
        let unbiased = if count > 1 {
            sq / (count - 1) as f64
        } else {
            biased
        };
        means[ch] = m as f32;
        vars[ch] = biased as f32;
        let rm = &mut running.mean.data_mut()[ch];
        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m as f32;
        let rv = &mut running.var.data_mut()[ch];
        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
    }
    normalize(input, gamma, beta, &means, &vars, BnMode::Train)
}

/// Eval-mode batch norm; reads the running statistics without touching them.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
) -> Result<(Tensor, BnCache)> {
    check_bn(input, gamma, beta, running)?;
    normalize(
        input,
        gamma,
        beta,
        running.mean.data(),
        running.var.data(),
        BnMode::Eval,
    )
}

fn check_bn(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
) -> Result<(usize, usize, usize, usize)> {
    let dims = nchw(input)?;
    let c = dims.1;
    if c == 0 {
        return Err(Error::dim("channels", "zero channel count"));
    }
    gamma.expect_shape(&[c], "bn gamma")?;
    beta.expect_shape(&[c], "bn beta")?;
    running.mean.expect_shape(&[c], "bn running mean")?;
    running.var.expect_shape(&[c], "bn running var")?;
    if running.var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("negative running variance".into()));
    }
    Ok(dims)
}

fn normalize(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f32],
    var: &[f32],
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let (b, c, h, w) = nchw(input)?;
    let plane = h * w;
    let x = input.data();
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0f32; x.len()];
    let mut y = vec![0f32; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let (m, s, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x[i] - m) * s;
                xhat[i] = xh;
                y[i] = gm * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), y)?,
        BnCache {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
            mode,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    upstream.expect_shape(cache.xhat.shape(), "bn upstream")?;
    let (b, c, h, w) = nchw(upstream)?;
    let plane = h * w;
    let n = (b * plane) as f32;
    let g = upstream.data();
    let xh = cache.xhat.data();
    let mut d_gamma = vec![0f32; c];
    let mut d_beta = vec![0f32; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                d_gamma[ch] += g[i] * xh[i];
                d_beta[ch] += g[i];
            }
        }
    }
    let mut d_in = vec![0f32; g.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let gm = gamma.data()[ch];
            let s = cache.inv_std[ch];
            match cache.mode {
                BnMode::Train => {
                    // dxhat = g * gamma; sums of dxhat and dxhat*xhat are gamma * d_beta, gamma * d_gamma
                    let sum_dxh = gm * d_beta[ch];
                    let sum_dxh_xh = gm * d_gamma[ch];
                    for i in off..off + plane {
                        let dxh = g[i] * gm;
                        d_in[i] = s / n * (n * dxh - sum_dxh - xh[i] * sum_dxh_xh);
                    }
                }
                BnMode::Eval => {
                    for i in off..off + plane {
                        d_in[i] = g[i] * gm * s;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(upstream.shape(), d_in)?,
        Tensor::new(&[c], d_gamma)?,
        Tensor::new(&[c], d_beta)?,
    ))
}

/// Mean over each `H x W` plane: `[C,H,W] -> [C]`, `[B,C,H,W] -> [B,C]`.
pub fn avgpool_global(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = nchw(input)?;
    let plane = h * w;
    let out: Vec<f32> = input
        .data()
        .chunks_exact(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    let shape = if input.rank() == 3 { vec![c] } else { vec![b, c] };
    Tensor::new(&shape, out)
}

pub fn avgpool_global_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let (h, w) = match *input_shape {
        [_, h, w] | [_, _, h, w] => (h, w),
        _ => return Err(Error::dim("rank", "avgpool input must be rank 3 or 4")),
    };
    let expected: Vec<usize> = input_shape[..input_shape.len() - 2].to_vec();
    upstream.expect_shape(&expected, "avgpool upstream")?;
    let plane = h * w;
    let scale = 1.0 / plane as f32;
    let data = upstream
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
        .collect();
    Tensor::new(input_shape, data)
}

/// `weights . input + bias` for `[D]` or `[B, D]` inputs.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, d) = fc_dims(input)?;
    let [k, wd] = *weights.shape() else {
        return Err(Error::dim("weights", format!("expected [K,D], got {:?}", weights.shape())));
    };
    if wd != d {
        return Err(Error::dim("features", format!("input has {d} features, weights expect {wd}")));
    }
    bias.expect_shape(&[k], "fc bias")?;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0f32; b * k];
    for bi in 0..b {
        let xr = &x[bi * d..(bi + 1) * d];
        for ki in 0..k {
            let wr = &wt[ki * d..(ki + 1) * d];
            let dot: f32 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            out[bi * k + ki] = dot + bias.data()[ki];
        }
    }
    let shape = if input.rank() == 1 { vec![k] } else { vec![b, k] };
    Tensor::new(&shape, out)
}

fn fc_dims(input: &Tensor) -> Result<(usize, usize)> {
    match *input.shape() {
        [d] => Ok((1, d)),
        [b, d] => Ok((b, d)),
        _ => Err(Error::dim("rank", format!("fc input must be [D] or [B,D], got {:?}", input.shape()))),
    }
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let (b, d) = fc_dims(input)?;
    let k = weights.shape()[0];
    let expected = if input.rank() == 1 { vec![k] } else { vec![b, k] };
    upstream.expect_shape(&expected, "fc upstream")?;
    let x = input.data();
    let wt = weights.data();
    let g = upstream.data();
    let mut d_w = vec![0f32; k * d];
    let mut d_b = vec![0f32; k];
    let mut d_x = vec![0f32; b * d];
    for bi in 0..b {
        let xr = &x[bi * d..(bi + 1) * d];
        let dxr = &mut d_x[bi * d..(bi + 1) * d];
        for ki in 0..k {
            let gv = g[bi * k + ki];
            d_b[ki] += gv;
            let wr = &wt[ki * d..(ki + 1) * d];
            let dwr = &mut d_w[ki * d..(ki + 1) * d];
            for j in 0..d {
                dwr[j] += gv * xr[j];
                dxr[j] += gv * wr[j];
            }
        }
    }
    Ok(LayerGrad {
        d_weights: Tensor::new(weights.shape(), d_w)?,
        d_input: Tensor::new(input.shape(), d_x)?,
        d_bias: Some(Tensor::new(&[k], d_b)?),
    })
}

/// Numerically stable softmax of a single logit vector.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// Cross-entropy of a one-hot label against `softmax(logits)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    if logits.rank() != 1 || logits.numel() < 2 {
        return Err(Error::dim("classes", format!("need [K] with K >= 2, got {:?}", logits.shape())));
    }
    let k = logits.numel();
    if label >= k {
        return Err(Error::Index { index: label, len: k });
    }
    let z = logits.data();
    let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let log_sum: f64 = z.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
    let loss = log_sum - (z[label] - max) as f64;
    Ok((loss as f32, Tensor::from_vec(softmax(z))))
}

/// Batched cross-entropy. Returns the mean loss, the probabilities and the
/// gradient of the mean loss with respect to the logits.
pub fn softmax_cross_entropy_batch(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f32, Tensor, Tensor)> {
    let [b, k] = *logits.shape() else {
        return Err(Error::dim("rank", format!("expected [B,K], got {:?}", logits.shape())));
    };
    if labels.len() != b {
        return Err(Error::dim("batch", format!("{b} logit rows but {} labels", labels.len())));
    }
    let mut total = 0f64;
    let mut probs = Vec::with_capacity(b * k);
    let mut grad = Vec::with_capacity(b * k);
    for (bi, &label) in labels.iter().enumerate() {
        let row = Tensor::from_vec(logits.data()[bi * k..(bi + 1) * k].to_vec());
        let (loss, p) = softmax_cross_entropy(&row, label)?;
        total += loss as f64;
        for (j, &pj) in p.data().iter().enumerate() {
            let y = if j == label { 1.0 } else { 0.0 };
            grad.push((pj - y) / b as f32);
        }
        probs.extend_from_slice(p.data());
    }
    Ok((
        (total / b as f64) as f32,
        Tensor::new(&[b, k], probs)?,
        Tensor::new(&[b, k], grad)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(input.shape(), "relu upstream")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

/// SGD with momentum: `buffer = momentum * buffer + grad; weights -= lr * buffer`.
pub fn sgd_step(
    weights: &mut Tensor,
    grad: &Tensor,
    lr: f32,
    momentum: f32,
    buffer: &mut Tensor,
) -> Result<()> {
    grad.expect_shape(weights.shape(), "sgd grad")?;
    buffer.expect_shape(weights.shape(), "sgd buffer")?;
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !grad.all_finite() {
        return Err(Error::Training("non-finite gradient, step aborted".into()));
    }
    for ((w, &g), v) in weights
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(buffer.data_mut().iter_mut())
    {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}
