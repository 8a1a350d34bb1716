//! Raw numeric kernels over row-major slices.

use super::mask::AttentionMask;
use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, each optionally
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n elements
    // of the three slices, whose lengths are checked by the debug asserts and
    // by every caller.
    unsafe {
        matrixmultiply::dgemm(
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's version is several times slower.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        return u.tanh();
    }
    let e = (2.0 * u.min(40.0).max(-40.0)).exp();
    1.0 - 2.0 / (e + 1.0)
}

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise `softmax(x / temperature)` with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, temperature: f64, out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / temperature).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}

/// Log-sum-exp of a row, stabilized by its maximum.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub model_dim: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    fn probs_len(&self) -> usize {
        self.batch * self.heads * self.q_len * self.k_len
    }

    #[inline]
    fn p_index(&self, b: usize, h: usize, i: usize, j: usize) -> usize {
        ((b * self.heads + h) * self.q_len + i) * self.k_len + j
    }
}

/// Scaled dot-product attention for all heads. `q` is `(batch·q_len)×d`,
/// `k` and `v` are `(batch·k_len)×d`; head `h` owns columns
/// `h·d/heads .. (h+1)·d/heads`. Returns the concatenated head outputs and
/// the attention weights laid out as `[batch, heads, q_len, k_len]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &AttentionMask,
    dims: &AttnDims,
) -> (Vec<f64>, Vec<f64>) {
    let d = dims.model_dim;
    let hd = dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; dims.probs_len()];
    let mut out = vec![0.0; dims.batch * dims.q_len * d];
    let mut scores = vec![0.0; dims.k_len];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let off = h * hd;
            for i in 0..dims.q_len {
                let qi = &q[(b * dims.q_len + i) * d + off..][..hd];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    if mask.allowed(b, i, j) {
                        let kj = &k[(b * dims.k_len + j) * d + off..][..hd];
                        *s = dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    if mask.allowed(b, i, j) {
                        let e = (s - max).exp();
                        probs[dims.p_index(b, h, i, j)] = e;
                        sum += e;
                    }
                }
                let inv = 1.0 / sum;
                let oi = &mut out[(b * dims.q_len + i) * d + off..][..hd];
                for j in 0..dims.k_len {
                    if !mask.allowed(b, i, j) {
                        continue;
                    }
                    let p = &mut probs[dims.p_index(b, h, i, j)];
                    *p *= inv;
                    let vj = &v[(b * dims.k_len + j) * d + off..][..hd];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += *p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    mask: &AttentionMask,
    dims: &AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = dims.model_dim;
    let hd = dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; dims.k_len];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let off = h * hd;
            for i in 0..dims.q_len {
                let go = &grad_out[(b * dims.q_len + i) * d + off..][..hd];
                let qrow = (b * dims.q_len + i) * d + off;
                let mut weighted = 0.0;
                for j in 0..dims.k_len {
                    if !mask.allowed(b, i, j) {
                        continue;
                    }
                    let p = probs[dims.p_index(b, h, i, j)];
                    let krow = (b * dims.k_len + j) * d + off;
                    dp[j] = dot(go, &v[krow..krow + hd]);
                    weighted += p * dp[j];
                    for (dvj, &g) in dv[krow..krow + hd].iter_mut().zip(go) {
                        *dvj += p * g;
                    }
                }
                for j in 0..dims.k_len {
                    if !mask.allowed(b, i, j) {
                        continue;
                    }
                    let p = probs[dims.p_index(b, h, i, j)];
                    let ds = p * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (b * dims.k_len + j) * d + off;
                    for t in 0..hd {
                        dq[qrow + t] += ds * k[krow + t];
                        dk[krow + t] += ds * q[qrow + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention weights `softmax(QKᵀ/√(d/h))` of an unprojected query/key pair,
/// returned as `[batch, heads, q_len, k_len]`.
pub fn attention_probs(
    q: &Tensor,
    k: &Tensor,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 || k.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "attention_probs",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let dims = AttnDims {
        batch: mask.batch(),
        q_len: mask.q_len(),
        k_len: mask.k_len(),
        heads,
        model_dim: d,
    };
    if q.rows() != dims.batch * dims.q_len || k.rows() != dims.batch * dims.k_len {
        return Err(Error::ShapeMismatch {
            op: "attention_probs",
            lhs: q.shape().to_vec(),
            rhs: vec![dims.batch, dims.q_len, dims.k_len],
        });
    }
    let (_, probs) = attention_forward(q.data(), k.data(), k.data(), mask, &dims);
    Tensor::new(vec![dims.batch, heads, dims.q_len, dims.k_len], probs)
}
