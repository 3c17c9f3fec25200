//! Activation and weight quantization, the clipped straight-through estimator,
//! and the XNOR/popcount fast path for binarized convolutions.
//!
//! Values are mapped from `[-1, 1]` onto a uniform grid of `Z + 1` levels with
//! `Z = 2^p - 1`:
//!
//! ```text
//! q(x) = v1 * (round((clip(x) + v0) / v1 * Z) / Z - v2)
//! ```
//!
//! The default constants `v0 = 1, v1 = 2, v2 = 0.5` send `[-1, 1]` to `[0, 1]`,
//! quantize there, and map back, so the grid is symmetric and collapses to
//! `sign` at one bit. Rounding is half away from zero.

use crate::error::{Error, Result};
use crate::ops::{self, BnMode, RunningStats};
use crate::tensor::Tensor;

/// Bit-depth meaning "not quantized".
pub const FULL_PRECISION: u8 = 32;

pub const SUPPORTED_BITS: [u8; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    bits: u8,
    levels: u32,
    pub v0: f64,
    pub v1: f64,
    pub v2: f64,
}

impl QuantParams {
    pub fn new(bits: u8) -> Result<Self> {
        Self::with_constants(bits, 1.0, 2.0, 0.5)
    }

    pub fn with_constants(bits: u8, v0: f64, v1: f64, v2: f64) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(Error::Config(format!(
                "bit-depth {bits} not supported, expected one of {SUPPORTED_BITS:?}"
            )));
        }
        if v1 == 0.0 || !v1.is_finite() {
            return Err(Error::Config("v1 must be finite and non-zero".into()));
        }
        Ok(Self {
            bits,
            levels: (1u32 << bits) - 1,
            v0,
            v1,
            v2,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// `Z = 2^p - 1`.
    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Grid spacing `v1 / Z`.
    pub fn step(&self) -> f64 {
        self.v1 / self.levels as f64
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> f32 {
        let x = x.clamp(-1.0, 1.0);
        if self.bits == 1 {
            return sign(x);
        }
        let z = self.levels as f64;
        let idx = ((x as f64 + self.v0) / self.v1 * z).round();
        (self.v1 * (idx / z - self.v2)) as f32
    }
}

/// `sign` with the tie `sign(0) = +1`.
#[inline]
pub fn sign(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn binarize(x: &Tensor) -> Tensor {
    x.map(sign)
}

/// Clip to `[-1, 1]` and snap to the grid of `q`.
pub fn quantize_uniform(x: &Tensor, q: &QuantParams) -> Tensor {
    x.map(|v| q.quantize_value(v))
}

/// Activation quantizer for a layer of the given bit-depth; 32 bits is the identity.
pub fn quantize_activations(x: &Tensor, bits: u8) -> Result<Tensor> {
    if bits == FULL_PRECISION {
        return Ok(x.clone());
    }
    Ok(quantize_uniform(x, &QuantParams::new(bits)?))
}

/// Mean absolute weight, `||W||_1 / n`.
pub fn weight_scale(w: &Tensor) -> Result<f32> {
    if w.numel() == 0 {
        return Err(Error::dim("weights", "empty tensor"));
    }
    let sum: f64 = w.data().iter().map(|&v| v.abs() as f64).sum();
    Ok((sum / w.numel() as f64) as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub w_q: Tensor,
    pub alpha: f32,
    pub bits: u8,
}

/// Quantize shadow weights; `alpha` is measured on the unquantized tensor.
pub fn quantize_weights(w: &Tensor, q: &QuantParams) -> Result<QuantizedWeights> {
    Ok(QuantizedWeights {
        w_q: quantize_uniform(w, q),
        alpha: weight_scale(w)?,
        bits: q.bits(),
    })
}

/// Clipped straight-through estimator: pass the gradient where
/// `|pre_quant| <= 1`, zero it elsewhere.
pub fn ste_backward(upstream: &Tensor, pre_quant_input: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(pre_quant_input.shape(), "ste upstream")?;
    let data = upstream
        .data()
        .iter()
        .zip(pre_quant_input.data())
        .map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape(), data)
}

/// Quantized convolution: batch norm, activation quantization, then
/// convolution with quantized weights rescaled by `alpha`. At 32 bits both
/// quantizers are bypassed and no rescaling happens.
#[allow(clippy::too_many_arguments)]
pub fn quanconv_forward(
    input: &Tensor,
    shadow_w: &Tensor,
    bits: u8,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    mode: BnMode,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let normed = ops::batchnorm(input, gamma, beta, running, mode)?;
    if bits == FULL_PRECISION {
        return ops::conv2d(&normed, shadow_w, stride, pad);
    }
    let q = QuantParams::new(bits)?;
    let acts = quantize_uniform(&normed, &q);
    let qw = quantize_weights(shadow_w, &q)?;
    Ok(ops::conv2d(&acts, &qw.w_q, stride, pad)?.scale(qw.alpha))
}

/// One-bit [`quanconv_forward`] evaluated with packed XNOR/popcount dot products.
#[allow(clippy::too_many_arguments)]
pub fn quanconv_forward_xnor(
    input: &Tensor,
    shadow_w: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    mode: BnMode,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let normed = ops::batchnorm(input, gamma, beta, running, mode)?;
    let alpha = weight_scale(shadow_w)?;
    Ok(xnor_conv2d(&normed, shadow_w, stride, pad)?.scale(alpha))
}

/// Sign bits packed into machine words, `1 = +1`, `0 = -1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    n: usize,
    words: Vec<u64>,
}

impl BitPlane {
    pub fn from_signs(values: &[f32]) -> Self {
        let mut words = vec![0u64; values.len().div_ceil(64)];
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self {
            n: values.len(),
            words,
        }
    }

    pub fn from_words(n: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != n.div_ceil(64) {
            return Err(Error::dim("words", format!("{n} bits need {} words", n.div_ceil(64))));
        }
        if !n.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (n % 64)) - 1;
            }
        }
        Ok(Self { n, words })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn to_signs(&self) -> Vec<f32> {
        (0..self.n)
            .map(|i| {
                if self.words[i / 64] >> (i % 64) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect()
    }
}

/// Dot product of two `±1` vectors: `2 * popcount(XNOR(a, b)) - n`.
pub fn xnor_popcount_dot(a: &BitPlane, b: &BitPlane) -> Result<i64> {
    if a.n != b.n {
        return Err(Error::dim("bits", format!("length {} vs {}", a.n, b.n)));
    }
    let mut matches = 0u32;
    for (i, (&x, &y)) in a.words.iter().zip(&b.words).enumerate() {
        let mut same = !(x ^ y);
        if i == a.words.len() - 1 && !a.n.is_multiple_of(64) {
            same &= (1u64 << (a.n % 64)) - 1;
        }
        matches += same.count_ones();
    }
    Ok(2 * matches as i64 - a.n as i64)
}

/// Packed window under construction: sign bits plus a validity mask for the
/// zero-padded taps, which contribute nothing to the dot product.
struct Window {
    bits: Vec<u64>,
    mask: Vec<u64>,
}

/// Convolution of `sign(input)` with `sign(weights)` via XNOR/popcount.
/// Returns the exact integer sums as `f32`.
pub fn xnor_conv2d(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    // reuse the float kernel's shape validation
    let (b, c_in, h, w) = ops::nchw(input)?;
    let [c_out, wc_in, k, kw] = *weights.shape() else {
        return Err(Error::dim("weights", format!("expected [C_out,C_in,k,k], got {:?}", weights.shape())));
    };
    if wc_in != c_in || k != kw || stride == 0 || k > h + 2 * pad || k > w + 2 * pad {
        // produce the same error the float path would
        ops::conv2d(input, weights, stride, pad)?;
    }
    let ho = ops::conv_out_dim(h, k, stride, pad);
    let wo = ops::conv_out_dim(w, k, stride, pad);
    let taps = c_in * k * k;
    let n_words = taps.div_ceil(64);
    let w_planes: Vec<BitPlane> = weights
        .data()
        .chunks_exact(taps)
        .map(BitPlane::from_signs)
        .collect();
    let x = input.data();
    let mut out = vec![0f32; b * c_out * ho * wo];
    let mut win = Window {
        bits: vec![0; n_words],
        mask: vec![0; n_words],
    };
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                win.bits.iter_mut().for_each(|v| *v = 0);
                win.mask.iter_mut().for_each(|v| *v = 0);
                let mut t = 0;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                let v = x[((bi * c_in + ci) * h + iy as usize) * w + ix as usize];
                                win.mask[t / 64] |= 1 << (t % 64);
                                if v >= 0.0 {
                                    win.bits[t / 64] |= 1 << (t % 64);
                                }
                            }
                            t += 1;
                        }
                    }
                }
                let valid: u32 = win.mask.iter().map(|m| m.count_ones()).sum();
                for (co, wp) in w_planes.iter().enumerate() {
                    let mut same = 0u32;
                    for ((&a, &bw), &m) in win.bits.iter().zip(wp.words()).zip(&win.mask) {
                        same += (!(a ^ bw) & m).count_ones();
                    }
                    out[((bi * c_out + co) * ho + oy) * wo + ox] = (2 * same as i64 - valid as i64) as f32;
                }
            }
        }
    }
    let shape = if input.rank() == 3 {
        vec![c_out, ho, wo]
    } else {
        vec![b, c_out, ho, wo]
    };
    Tensor::new(&shape, out)
}
