//! Minimal dense f32 numerics for the toy transformer.
//!
//! Everything here is a pure function over borrowed inputs. Row-wise kernels
//! process each row with the same loop order regardless of how many rows are
//! in the batch, so a batched call and a sequence of single-row calls produce
//! bit-identical results.

use thiserror::Error;

/// RMS normalization epsilon.
pub const RMS_EPS: f32 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mask for query {query} allows {allowed} keys but only {available} exist")]
    Mask {
        query: usize,
        allowed: usize,
        available: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(TensorError::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Appends one row; an empty (0x0) matrix adopts the row's width.
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(TensorError::Dimension(format!(
                "cannot push a row of {} into a matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn truncate_rows(&mut self, rows: usize) {
        if rows < self.rows {
            self.rows = rows;
            self.data.truncate(rows * self.cols);
        }
    }

    /// Columns `[start, start + len)` of every row, as a new matrix.
    pub fn column_slice(&self, start: usize, len: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::Dimension(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row vector times matrix: `x (1 x k) * b (k x n)`.
pub fn vecmat(x: &[f32], b: &Matrix) -> Result<Vec<f32>> {
    if x.len() != b.rows {
        return Err(TensorError::Dimension(format!(
            "vector of length {} times {}x{} matrix",
            x.len(),
            b.rows,
            b.cols
        )));
    }
    let mut out = vec![0.0f32; b.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &bv) in out.iter_mut().zip(b.row(k)) {
            *o += xk * bv;
        }
    }
    Ok(out)
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TensorError::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let row = vecmat(a.row(r), b)?;
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(TensorError::Dimension("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

pub fn rms_norm(h: &[f32], gain: &[f32]) -> Result<Vec<f32>> {
    if h.len() != gain.len() {
        return Err(TensorError::Dimension(format!(
            "rms_norm input has {} entries, gain has {}",
            h.len(),
            gain.len()
        )));
    }
    let mean_sq = h.iter().map(|x| x * x).sum::<f32>() / h.len().max(1) as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    Ok(h.iter().zip(gain).map(|(x, g)| x * inv * g).collect())
}

/// Applies [`rms_norm`] to every row.
pub fn rms_norm_rows(h: &Matrix, gain: &[f32]) -> Result<Matrix> {
    let mut out = Matrix::zeros(h.rows, h.cols);
    for r in 0..h.rows {
        let normed = rms_norm(h.row(r), gain)?;
        out.row_mut(r).copy_from_slice(&normed);
    }
    Ok(out)
}

/// Single-head scaled dot-product attention.
///
/// Query `q` attends to the first `mask[q]` rows of `keys`/`values`; all
/// later keys get probability exactly zero. A query with `mask[q] == 0`
/// produces a zero row.
pub fn attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    mask: &[usize],
) -> Result<Matrix> {
    if keys.rows != values.rows {
        return Err(TensorError::Dimension(format!(
            "{} keys but {} values",
            keys.rows, values.rows
        )));
    }
    if queries.cols != keys.cols {
        return Err(TensorError::Dimension(format!(
            "query width {} differs from key width {}",
            queries.cols, keys.cols
        )));
    }
    if mask.len() != queries.rows {
        return Err(TensorError::Dimension(format!(
            "{} mask entries for {} queries",
            mask.len(),
            queries.rows
        )));
    }
    let scale = 1.0 / (queries.cols as f32).sqrt();
    let mut out = Matrix::zeros(queries.rows, values.cols);
    for (qi, &allowed) in mask.iter().enumerate() {
        if allowed > keys.rows {
            return Err(TensorError::Mask {
                query: qi,
                allowed,
                available: keys.rows,
            });
        }
        if allowed == 0 {
            continue;
        }
        let q = queries.row(qi);
        let scores: Vec<f32> = (0..allowed)
            .map(|k| dot(q, keys.row(k)) * scale)
            .collect();
        let probs = softmax_row(&scores)?;
        let o = out.row_mut(qi);
        for (k, p) in probs.iter().enumerate() {
            for (ov, &vv) in o.iter_mut().zip(values.row(k)) {
                *ov += p * vv;
            }
        }
    }
    Ok(out)
}

/// Multi-head attention over column blocks of width `cols / n_heads`.
pub fn multi_head_attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    mask: &[usize],
    n_heads: usize,
) -> Result<Matrix> {
    if n_heads == 0 || !queries.cols.is_multiple_of(n_heads) {
        return Err(TensorError::Dimension(format!(
            "width {} not divisible into {n_heads} heads",
            queries.cols
        )));
    }
    if keys.cols != queries.cols || values.cols != queries.cols {
        return Err(TensorError::Dimension(
            "query, key and value widths must agree".into(),
        ));
    }
    let head = queries.cols / n_heads;
    let mut out = Matrix::zeros(queries.rows, queries.cols);
    for h in 0..n_heads {
        let start = h * head;
        let o = attention(
            &queries.column_slice(start, head),
            &keys.column_slice(start, head),
            &values.column_slice(start, head),
            mask,
        )?;
        for r in 0..queries.rows {
            out.row_mut(r)[start..start + head].copy_from_slice(o.row(r));
        }
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
