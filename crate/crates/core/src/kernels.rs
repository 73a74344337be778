// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric kernels for the forward pass.
//!
//! Every dot product accumulates in `f64` and walks the shared dimension in
//! increasing order. Blocking only happens along output rows and columns, so
//! a given output element is always produced by the same sequence of
//! floating-point operations regardless of matrix size or batch packing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Default layernorm epsilon for GPT-2 checkpoints.
pub const LAYERNORM_EPS: f32 = 1e-5;

/// Output columns processed per accumulator block in [`matmul`].
const COL_BLOCK: usize = 64;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Wraps `data` as a `rows x cols` matrix.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left_rows: rows,
                left_cols: cols,
                right_rows: data.len(),
                right_cols: 1,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    left_rows: rows.len(),
                    left_cols: cols,
                    right_rows: 1,
                    right_cols: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Overwrites the block whose top-left corner is `(row, col)` with `src`.
    pub fn write_block(&mut self, row: usize, col: usize, src: &Matrix) {
        for r in 0..src.rows {
            let dst = &mut self.row_mut(row + r)[col..col + src.cols];
            dst.copy_from_slice(src.row(r));
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; `f32::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        if self.shape() != other.shape() {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// In-place element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    linear(a, b, None)
}

/// `a · b + bias`, with `bias` broadcast over rows.
///
/// Each output is `Σ_k a[i,k]·b[k,j]` summed in `f64` for `k = 0, 1, ...`,
/// rounded to `f32`, then offset by `bias[j]`.
pub fn linear(a: &Matrix, b: &Matrix, bias: Option<&[f32]>) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    if let Some(bias) = bias {
        if bias.len() != b.cols {
            return Err(Error::Shape {
                op: "linear bias",
                left_rows: b.rows,
                left_cols: b.cols,
                right_rows: 1,
                right_cols: bias.len(),
            });
        }
    }
    let (n, k_dim, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    let mut acc = vec![0.0f64; n * COL_BLOCK];
    let mut j0 = 0;
    while j0 < m {
        let width = COL_BLOCK.min(m - j0);
        acc[..n * width].iter_mut().for_each(|v| *v = 0.0);
        for k in 0..k_dim {
            let b_row = &b.data[k * m + j0..k * m + j0 + width];
            for i in 0..n {
                let aik = f64::from(a.data[i * k_dim + k]);
                let acc_row = &mut acc[i * width..(i + 1) * width];
                for (acc_v, &b_v) in acc_row.iter_mut().zip(b_row) {
                    *acc_v += aik * f64::from(b_v);
                }
            }
        }
        for i in 0..n {
            let out_row = &mut out.data[i * m + j0..i * m + j0 + width];
            let acc_row = &acc[i * width..(i + 1) * width];
            for (o, &v) in out_row.iter_mut().zip(acc_row) {
                *o = v as f32;
            }
            if let Some(bias) = bias {
                for (o, &bv) in out_row.iter_mut().zip(&bias[j0..j0 + width]) {
                    *o += bv;
                }
            }
        }
        j0 += width;
    }
    Ok(out)
}

/// `a · bᵀ`, i.e. row-by-row dot products. Used for attention scores.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_transposed", a, b));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| {
        dot(a.row(i), b.row(j)) as f32
    }))
}

#[inline]
fn dot(x: &[f32], y: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        acc += f64::from(a) * f64::from(b);
    }
    acc
}

/// Row softmax with max subtraction. With `causal`, entry `(i, j)` for
/// `j > i` is forced to exactly zero and excluded from its row's normalizer.
pub fn softmax_rows(m: &Matrix, causal: bool) -> Matrix {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out, causal);
    out
}

pub(crate) fn softmax_rows_in_place(m: &mut Matrix, causal: bool) {
    let cols = m.cols;
    for i in 0..m.rows {
        let row = m.row_mut(i);
        let visible = if causal { (i + 1).min(cols) } else { cols };
        softmax_slice(&mut row[..visible]);
        row[visible..].iter_mut().for_each(|v| *v = 0.0);
    }
}

fn softmax_slice(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = math::expf(*v - max);
        sum += f64::from(*v);
    }
    for v in row.iter_mut() {
        *v = (f64::from(*v) / sum) as f32;
    }
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` with population variance.
pub fn layernorm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Shape {
            op: "layernorm",
            left_rows: 1,
            left_cols: x.len(),
            right_rows: gamma.len(),
            right_cols: beta.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    layernorm_into(x, gamma, beta, eps, &mut out);
    Ok(out)
}

fn layernorm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f64;
    if x.is_empty() {
        return;
    }
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / math::sqrt(var + f64::from(eps));
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = ((f64::from(v) - mean) * inv) as f32 * g + b;
    }
}

/// Applies [`layernorm`] to every row of `m`.
pub fn layernorm_rows(m: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    if m.cols != gamma.len() || m.cols != beta.len() {
        return Err(Error::Shape {
            op: "layernorm_rows",
            left_rows: m.rows,
            left_cols: m.cols,
            right_rows: gamma.len(),
            right_cols: beta.len(),
        });
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        layernorm_into(m.row(r), gamma, beta, eps, out.row_mut(r));
    }
    Ok(out)
}

/// Tanh-approximation GELU of a scalar.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + math::tanhf(SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)))
}

pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

pub(crate) fn gelu_in_place(m: &mut Matrix) {
    m.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = gelu_scalar(*v));
}
