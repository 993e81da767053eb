//! Dense row-major matrices and the handful of kernels the toy blocks need.
//!
//! Every reduction runs left to right over a fixed index order, so the same
//! row produces bit-identical results whether it is computed alone or as part
//! of a larger batch.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match shape");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Appends the rows of `other` below `self`.
    pub fn extend_rows(&mut self, other: &Matrix) {
        assert_eq!(self.cols, other.cols, "column mismatch in extend_rows");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `x · W` for a single row vector, `W` stored `[in × out]`.
    #[inline]
    pub fn vec_mul(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            let w = self.row(i);
            for (o, &wij) in out.iter_mut().zip(w) {
                *o += xi * wij;
            }
        }
    }

    /// `g · Wᵀ` for a single row vector: maps an output-space gradient back to
    /// input space.
    #[inline]
    pub fn vec_mul_transposed(&self, g: &[f32], out: &mut [f32]) {
        debug_assert_eq!(g.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), g);
        }
    }
}

/// Dot product over eight interleaved partial sums, which lets the compiler
/// vectorize it. The summation order is fixed, so results are reproducible.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub const LN_EPS: f32 = 1e-5;

/// Layer norm of one row. Returns `(mean, inv_std)` for the backward pass.
#[inline]
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) -> (f32, f32) {
    let n = x.len() as f32;
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0f32;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv_std * g + b;
    }
    (mean, inv_std)
}

/// Backward of [`layer_norm`] with respect to its input, accumulated into `dx`.
pub fn layer_norm_backward(
    x: &[f32],
    gain: &[f32],
    mean: f32,
    inv_std: f32,
    dy: &[f32],
    dx: &mut [f32],
) {
    let n = x.len() as f32;
    let mut sum_dxhat = 0.0f32;
    let mut sum_dxhat_xhat = 0.0f32;
    for ((&v, &g), &d) in x.iter().zip(gain).zip(dy) {
        let xhat = (v - mean) * inv_std;
        let dxhat = d * g;
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    let m1 = sum_dxhat / n;
    let m2 = sum_dxhat_xhat / n;
    for (((o, &v), &g), &d) in dx.iter_mut().zip(x).zip(gain).zip(dy) {
        let xhat = (v - mean) * inv_std;
        *o += inv_std * (d * g - m1 - xhat * m2);
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place(v: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
