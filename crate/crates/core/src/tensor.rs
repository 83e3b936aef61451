//! Dense f32 kernels shared by the model, the relay store and the metrics.
//!
//! Every reduction runs left to right in a fixed order, so a computation
//! that touches the same inputs produces the same bits regardless of how
//! rows are batched. The relay engine relies on this: recomputing a row on
//! its own gives exactly the result a full prefill would.

use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};

/// Shape-tagged, row-major f32 array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(RelayError::ShapeMismatch {
                op: "tensor",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows into a new `[indices.len() x cols]` tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(RelayError::ShapeMismatch {
                op,
                expected: vec![0, 0],
                got: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `a[m x k] * b[k x n]`. Each output element sums over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul")?;
    let (kb, n) = b.expect_2d("matmul")?;
    if k != kb {
        return Err(RelayError::ShapeMismatch {
            op: "matmul",
            expected: vec![m, k, k, n],
            got: vec![m, k, kb, n],
        });
    }
    let mut out = vec![0.0f32; m * n];
    matmul_rows(&a.data, m, k, &b.data, n, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Raw kernel behind [`matmul`]: `out[m x n] = a[m x k] * b[k x n]`.
///
/// Row `i` of `out` depends only on row `i` of `a`, and the accumulation over
/// `k` is strictly sequential, matching a naive triple loop bit for bit.
pub(crate) fn matmul_rows(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// In-place softmax with max subtraction.
pub(crate) fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.expect_2d("softmax_rows")?;
    let mut out = x.clone();
    let cols = out.cols();
    if cols > 0 {
        for row in out.data.chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// `x / sqrt(mean(x^2) + eps) * gain`.
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() {
        return Err(RelayError::LengthMismatch {
            op: "rms_norm",
            left: x.len(),
            right: gain.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    rms_norm_into(x, gain, eps, &mut out);
    Ok(out)
}

pub(crate) fn rms_norm_into(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Rotates adjacent pairs `(2i, 2i+1)` of a single head vector by
/// `position * theta_base^(-2i/d_head)`.
pub fn rope_rotate(x: &[f32], position: i64, theta_base: f64) -> Result<Vec<f32>> {
    if x.len() % 2 != 0 {
        return Err(RelayError::OddHeadDim(x.len()));
    }
    let mut out = x.to_vec();
    rope_rotate_heads(&mut out, x.len(), position, theta_base);
    Ok(out)
}

/// Applies [`rope_rotate`] in place to every `head_dim`-sized chunk of `x`.
///
/// Angles and their sines and cosines are evaluated in f64 before rounding
/// to f32, which keeps large positions accurate.
pub(crate) fn rope_rotate_heads(x: &mut [f32], head_dim: usize, position: i64, theta_base: f64) {
    debug_assert!(head_dim % 2 == 0);
    let half = head_dim / 2;
    for i in 0..half {
        let inv_freq = theta_base.powf(-((2 * i) as f64) / head_dim as f64);
        let angle = position as f64 * inv_freq;
        let (s, c) = angle.sin_cos();
        let (s, c) = (s as f32, c as f32);
        for head in x.chunks_mut(head_dim) {
            let a = head[2 * i];
            let b = head[2 * i + 1];
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Cosine similarity accumulated in f64. Returns 0 when either norm is
/// below `1e-12`. Bit-equal nonzero inputs give exactly 1.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RelayError::LengthMismatch {
            op: "cosine",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

pub(crate) fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
