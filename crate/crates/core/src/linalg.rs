//! Dense row-major matrices sized for desk-scale training.
//!
//! Everything in this crate works on small matrices (latent widths of a
//! few dozen, 24 sub-periods), so the implementations favor clarity and
//! bit-reproducibility over speed: plain loops, no blocking, no
//! parallelism.

use serde::{Deserialize, Serialize};

/// Dense row-major `f64` matrix. Column vectors are `n x 1`, row
/// vectors `1 x n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat { rows, cols, data: vec![value; rows * cols] }
    }

    /// Builds a matrix from row-major data. Panics if the length does
    /// not match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length {} != {}x{}", data.len(), rows, cols);
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    /// `n x 1` column vector.
    pub fn col_vec(values: &[f64]) -> Self {
        Mat { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// `1 x n` row vector.
    pub fn row_vec(values: &[f64]) -> Self {
        Mat { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(lhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        self.zip(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "hadamard shape mismatch");
        self.zip(rhs, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Mat {
        self.map(|v| v * factor)
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&self, row: &Mat) -> Mat {
        assert_eq!(row.shape(), (1, self.cols), "broadcast row shape mismatch");
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] += row.data[j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, rhs: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += a * x`, elementwise.
    pub fn axpy(&mut self, a: f64, x: &Mat) {
        assert_eq!(self.shape(), x.shape(), "axpy shape mismatch");
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
    }

    pub fn add_assign(&mut self, rhs: &Mat) {
        self.axpy(1.0, rhs);
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Mat {
        assert!(start + width <= self.cols, "column slice out of range");
        let mut out = Mat::zeros(self.rows, width);
        for i in 0..self.rows {
            let src = &self.data[i * self.cols + start..i * self.cols + start + width];
            out.data[i * width..(i + 1) * width].copy_from_slice(src);
        }
        out
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Mat]) -> Mat {
        assert!(!parts.is_empty(), "nothing to concatenate");
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat row mismatch");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.data[i * cols + offset..i * cols + offset + p.cols]
                    .copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {}x{}", self.rows, self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {}x{}", self.rows, self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Cholesky factor (lower triangular) of a symmetric positive-definite
/// matrix, or `None` if the matrix is not numerically PD.
pub fn cholesky(a: &Mat) -> Option<Mat> {
    assert_eq!(a.rows(), a.cols(), "cholesky needs a square matrix");
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn cholesky_solve(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    assert_eq!(b.len(), n, "rhs length mismatch");
    let l = cholesky(a)?;
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[(i, k)] * y[k];
        }
        y[i] = sum / l[(i, i)];
    }
    // backward: L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[(k, i)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    Some(x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax with max subtraction for overflow safety.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = &mut out.data_mut()[i * m.cols()..(i + 1) * m.cols()];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Layer normalization applied to each row independently, with a
/// learnable per-column scale and shift (both `1 x cols`). Uses the
/// population variance of the row.
pub fn layer_norm_rows(x: &Mat, scale: &Mat, shift: &Mat, eps: f64) -> Mat {
    assert_eq!(scale.shape(), (1, x.cols()), "layer norm scale shape");
    assert_eq!(shift.shape(), (1, x.cols()), "layer norm shift shape");
    let cols = x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..x.cols() {
            out[(i, j)] = scale[(0, j)] * ((row[j] - mean) * inv) + shift[(0, j)];
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix, computed with cyclic Jacobi
/// rotations. Intended for the small matrices that arise as residual
/// covariances; each sweep costs O(n^3).
pub fn min_symmetric_eigenvalue(a: &Mat) -> f64 {
    let n = a.rows();
    assert_eq!(n, a.cols(), "eigenvalues need a square matrix");
    assert!(n > 0, "eigenvalues need a nonempty matrix");
    let mut m = a.clone();
    let scale = m.frob_norm_sq().sqrt();
    if scale == 0.0 {
        return 0.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[(i, i)]).fold(f64::INFINITY, f64::min)
}
