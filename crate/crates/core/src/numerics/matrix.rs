//! Dense row-major matrices and vectors, 64-bit throughout.
//!
//! Everything in the pipeline — prompts, hidden states, logits, gradients —
//! lives in these two types. Operations are pure: inputs are never mutated
//! and outputs are freshly allocated.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Identity (square).
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from row-major data; the length must match `rows * cols` and
    /// every entry must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("data of length {}", data.len()),
            ));
        }
        let m = Matrix { rows, cols, data };
        if !m.is_finite() {
            return Err(Error::arg("Matrix::from_vec", "non-finite entry"));
        }
        Ok(m)
    }

    /// Convenience constructor for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::arg("Matrix::from_rows", "ragged rows"));
        }
        let data: Vec<f64> = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Matrix::from_vec(r, c, data)
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

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`, in place. Shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Matrix::add_scaled",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Dense vector of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn ones(len: usize) -> Self {
        Vector {
            data: vec![1.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("Vector::from_vec", "non-finite entry"));
        }
        Ok(Vector { data })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add_scaled(&mut self, other: &Vector, alpha: f64) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "Vector::add_scaled",
                self.len().to_string(),
                other.len().to_string(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }
}

/// Standard matrix product. `a.cols` must equal `b.rows`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_string(), b.shape_string()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order: the inner loop walks both `b` and `out` contiguously.
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Elementwise (Hadamard) product of two same-shaped matrices.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::shape("hadamard", a.shape_string(), b.shape_string()));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x * y)
            .collect(),
    })
}

/// Outer product `u ⊗ v`: shape `(u.len, v.len)`, rank at most one.
pub fn outer(u: &Vector, v: &Vector) -> Result<Matrix> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::arg("outer", "zero-length input"));
    }
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &ui in u.as_slice() {
        for &vj in v.as_slice() {
            data.push(ui * vj);
        }
    }
    Ok(Matrix {
        rows: u.len(),
        cols: v.len(),
        data,
    })
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape_string(), b.shape_string()));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x + y)
            .collect(),
    })
}

pub fn scale(a: &Matrix, s: f64) -> Matrix {
    a.map(|v| v * s)
}

/// Rows `[start, end)` of `a` as a new matrix.
pub fn row_slice(a: &Matrix, start: usize, end: usize) -> Result<Matrix> {
    if start > end || end > a.rows {
        return Err(Error::arg(
            "row_slice",
            format!("range {start}..{end} out of bounds for {} rows", a.rows),
        ));
    }
    Ok(Matrix {
        rows: end - start,
        cols: a.cols,
        data: a.data[start * a.cols..end * a.cols].to_vec(),
    })
}

/// Index of the largest entry; first occurrence wins on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Layer normalization of a single feature vector.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv + b)
        .collect()
}

/// GELU activation (tanh approximation).
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`] at `x`.
#[inline]
pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Mean-centered log-sum-exp softmax; numerically stable for any logit scale.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax, stable via max subtraction.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v - max - log_sum).collect()
}

/// Temperature-scaled softmax over a vector of logits. `temp` must be > 0.
pub fn softmax_with_temperature(z: &Vector, temp: f64) -> Result<Vector> {
    if !(temp > 0.0) {
        return Err(Error::arg(
            "softmax_with_temperature",
            format!("temperature must be positive, got {temp}"),
        ));
    }
    let scaled: Vec<f64> = z.as_slice().iter().map(|&v| v / temp).collect();
    Ok(Vector {
        data: softmax(&scaled),
    })
}

/// Negative log-likelihood of `target` under `softmax(logits)`.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine",
            u.len().to_string(),
            v.len().to_string(),
        ));
    }
    let nu = l2_norm(u.as_slice());
    let nv = l2_norm(v.as_slice());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::arg("cosine", "zero-norm vector"));
    }
    let dot: f64 = u
        .as_slice()
        .iter()
        .zip(v.as_slice().iter())
        .map(|(a, b)| a * b)
        .sum();
    Ok(dot / (nu * nv))
}
