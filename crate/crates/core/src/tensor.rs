//! Dense row-major `f64` kernels.
//!
//! Every inner-product style reduction accumulates left to right over the
//! inner dimension starting from `0.0`, with no fused multiply-add, so results
//! are bit-reproducible across runs and platforms.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};

/// A `1 × n` activation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RowVector(Vec<f64>);

impl RowVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("row vector must be non-empty".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "row vector element {i} is not finite"
            )));
        }
        Ok(Self(data))
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self(data)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Left-to-right sum of the elements.
    pub fn sum(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc + v)
    }

    /// `x · xᵀ`, accumulated left to right.
    pub fn dot_self(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc + v * v)
    }

    /// `self · m` for a `1 × n` row and an `n × m` matrix.
    pub fn matmul(&self, m: &Matrix) -> Result<RowVector> {
        if self.len() != m.rows {
            return Err(mismatch("vector-matrix product", m.rows, self.len()));
        }
        Ok(RowVector(vecmat(&self.0, m)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl TryFrom<Vec<f64>> for RowVector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Self::new(data)
    }
}

impl From<RowVector> for Vec<f64> {
    fn from(v: RowVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for RowVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk shape header plus row-major data.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if rows * cols != data.len() {
            return Err(mismatch("matrix construction", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "matrix contains non-finite values".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(mismatch("matrix from rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// The all-ones matrix `E`.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![1.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> RowVector {
        RowVector::from_raw(self.row(r).to_vec())
    }

    /// Stack equal-length rows into a matrix.
    pub fn stack(rows: &[RowVector]) -> Result<Self> {
        let cols = rows.first().map_or(0, RowVector::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(mismatch("row stacking", cols, r.len()));
            }
            data.extend_from_slice(r.as_slice());
        }
        if rows.is_empty() {
            return Err(Error::InvalidInput("cannot stack zero rows".into()));
        }
        Ok(Self::from_raw(rows.len(), cols, data))
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Matrix::from_raw(self.cols, self.rows, data)
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix::from_raw(self.rows, width, data)
    }

    /// `1⃗ · self`: the sum of each column, accumulated top to bottom.
    pub fn column_sums(&self) -> RowVector {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        RowVector::from_raw(sums)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }
}

fn vecmat(x: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += xk * w;
        }
    }
    out
}

/// Operator product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(mismatch("matmul", a.cols, b.rows));
    }
    let mut data = Vec::with_capacity(a.rows * b.cols);
    for r in 0..a.rows {
        data.extend(vecmat(a.row(r), b));
    }
    Ok(Matrix::from_raw(a.rows, b.cols, data))
}

/// Element-wise product `a ⊙ b`.
pub fn hadamard(a: &RowVector, b: &RowVector) -> Result<RowVector> {
    if a.len() != b.len() {
        return Err(mismatch("hadamard", a.len(), b.len()));
    }
    Ok(RowVector::from_raw(
        a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
    ))
}

/// `Diag(v)`.
pub fn diag(v: &RowVector) -> Matrix {
    let n = v.len();
    let mut m = Matrix::zeros(n, n);
    for (i, &x) in v.iter().enumerate() {
        m.data[i * n + i] = x;
    }
    m
}

/// `s · v + b`.
pub fn scale_add(v: &RowVector, s: f64, b: &RowVector) -> Result<RowVector> {
    if !s.is_finite() {
        return Err(Error::InvalidInput(format!(
            "scale factor {s} is not finite"
        )));
    }
    if v.len() != b.len() {
        return Err(mismatch("scale_add", v.len(), b.len()));
    }
    Ok(RowVector::from_raw(
        v.iter().zip(b.iter()).map(|(x, y)| s * x + y).collect(),
    ))
}

/// Norm-wise relative error `‖actual − expected‖∞ / ‖expected‖∞`.
///
/// Falls back to the absolute error when `expected` is identically zero.
pub fn max_rel_err(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    let diff = actual
        .iter()
        .zip(expected)
        .fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));
    let scale = expected.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
