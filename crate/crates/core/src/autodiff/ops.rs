//! Plain forward/backward kernels shared by the tape and by tests.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// LeakyReLU negative slope used by the attention scorer unless configured.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Probabilities entering the boundary cross-entropy are clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Overflow-safe logistic function.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    let m = if x > 0.0 { x } else { 0.0 };
    m + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// `C[m×n] = A[m×k] · B[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Row-wise softmax restricted to `mask`; masked-out entries are exactly 0.
///
/// `scores` holds `scores.len() / width` rows. Every row needs at least one
/// masked-in entry.
pub fn masked_softmax_forward(scores: &[f64], mask: &[bool], width: usize) -> Result<Vec<f64>> {
    if scores.len() != mask.len() || width == 0 || scores.len() % width != 0 {
        return Err(Error::shape("masked_softmax", &[scores.len()], &[mask.len()]));
    }
    let mut out = vec![0.0; scores.len()];
    for (r, (srow, mrow)) in scores.chunks(width).zip(mask.chunks(width)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (&s, &m) in srow.iter().zip(mrow) {
            if m && s > max {
                max = s;
            }
        }
        if max == f64::NEG_INFINITY {
            if mrow.iter().any(|&m| m) {
                return Err(Error::NonFinite(alloc::format!(
                    "masked_softmax row {r} has no finite masked-in score"
                )));
            }
            return Err(Error::Domain {
                op: "masked_softmax",
                msg: alloc::format!("row {r} has an all-false mask"),
            });
        }
        let orow = &mut out[r * width..(r + 1) * width];
        let mut total = 0.0;
        for ((o, &s), &m) in orow.iter_mut().zip(srow).zip(mrow) {
            if m {
                *o = libm::exp(s - max);
                total += *o;
            }
        }
        for (o, &m) in orow.iter_mut().zip(mrow) {
            if m {
                *o /= total;
            }
        }
    }
    Ok(out)
}

/// Geometry of a 1D cross-correlation with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub len_out: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, len) = match x_shape {
            [c, l] => (*c, *l),
            _ => return Err(Error::shape("conv1d", x_shape, k_shape)),
        };
        let (c_out, kc, ksize) = match k_shape {
            [o, c, k] => (*o, *c, *k),
            _ => return Err(Error::shape("conv1d", x_shape, k_shape)),
        };
        if kc != c_in || ksize == 0 {
            return Err(Error::shape("conv1d", x_shape, k_shape));
        }
        if stride == 0 {
            return Err(Error::Contract("conv1d stride must be at least 1".into()));
        }
        if len + 2 * pad < ksize {
            return Err(Error::shape("conv1d", x_shape, k_shape));
        }
        let len_out = (len + 2 * pad - ksize) / stride + 1;
        Ok(ConvGeom {
            c_in,
            len,
            c_out,
            ksize,
            stride,
            pad,
            len_out,
        })
    }

    /// Input position read by output `l` at kernel tap `t`, if inside the
    /// unpadded signal.
    #[inline]
    fn src(&self, l: usize, t: usize) -> Option<usize> {
        let p = l * self.stride + t;
        (p >= self.pad && p - self.pad < self.len).then(|| p - self.pad)
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `x` is `[c_in × len]`, `kernels` is `[c_out × c_in × k]`, the result is
/// `[c_out × len_out]` with `len_out = (len + 2·pad − k) / stride + 1`.
pub fn conv1d_forward(
    x: &[f64],
    x_shape: &[usize],
    kernels: &[f64],
    k_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, usize)> {
    let g = ConvGeom::new(x_shape, k_shape, stride, pad)?;
    Ok((conv1d_raw(x, kernels, &g), g.len_out))
}

pub(crate) fn conv1d_raw(x: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.len_out];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            let krow = &kernels[(o * g.c_in + c) * g.ksize..(o * g.c_in + c + 1) * g.ksize];
            let xrow = &x[c * g.len..(c + 1) * g.len];
            for l in 0..g.len_out {
                let mut acc = 0.0;
                for (t, &kv) in krow.iter().enumerate() {
                    if let Some(p) = g.src(l, t) {
                        acc += kv * xrow[p];
                    }
                }
                out[o * g.len_out + l] += acc;
            }
        }
    }
    out
}

pub(crate) fn conv1d_backward(
    x: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for o in 0..g.c_out {
            for c in 0..g.c_in {
                let kbase = (o * g.c_in + c) * g.ksize;
                for l in 0..g.len_out {
                    let go = grad_out[o * g.len_out + l];
                    if go == 0.0 {
                        continue;
                    }
                    for t in 0..g.ksize {
                        if let Some(p) = g.src(l, t) {
                            dx[c * g.len + p] += go * kernels[kbase + t];
                        }
                    }
                }
            }
        }
    }
    if let Some(dk) = dk {
        for o in 0..g.c_out {
            for c in 0..g.c_in {
                let kbase = (o * g.c_in + c) * g.ksize;
                for l in 0..g.len_out {
                    let go = grad_out[o * g.len_out + l];
                    if go == 0.0 {
                        continue;
                    }
                    for t in 0..g.ksize {
                        if let Some(p) = g.src(l, t) {
                            dk[kbase + t] += go * x[c * g.len + p];
                        }
                    }
                }
            }
        }
    }
}
