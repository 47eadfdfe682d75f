//! Dense 64-bit linear algebra substrate: matrices, products, norms, SVD,
//! seeded RNG, and the central-difference gradient oracle.

mod rng;
mod svd;

pub use rng::Rng;
pub use svd::{svd, SvdResult};

use crate::error::{CovError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(CovError::shape(
                "from_vec",
                format!("{} values for a {}x{} matrix", data.len(), rows, cols),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Convenience for tests and
    /// hand-written examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CovError::shape(
                    "from_rows",
                    format!("row of length {} in a {}-column matrix", row.len(), c),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert!(i < self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= alpha;
        }
        out
    }

    /// Elementwise `self - other`.
    pub fn minus(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(CovError::shape(
                "minus",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o -= v;
        }
        Ok(out)
    }

    /// In-place `self += alpha * other`. Panics on shape mismatch (internal use).
    pub fn add_assign_scaled(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.rows, other.rows, "add_assign_scaled row mismatch");
        assert_eq!(self.cols, other.cols, "add_assign_scaled col mismatch");
        for (o, v) in self.data.iter_mut().zip(&other.data) {
            *o += alpha * v;
        }
    }

    /// Per-column mean, i.e. the mean row vector.
    pub fn col_means(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        for m in &mut mu {
            *m /= n;
        }
        mu
    }

    /// Copies the given rows (in the given order) into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality (distinguishes -0.0 from 0.0; NaN equals NaN).
    /// Value-level `==` is not enough for the reproducibility guarantees.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Dense product `a * b`.
///
/// The accumulation order is fixed (row-major, inner index ascending), so the
/// result is bitwise reproducible for equal inputs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(CovError::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, v) in orow.iter_mut().zip(brow) {
                *o += aik * v;
            }
        }
    }
    Ok(out)
}

/// Squared Frobenius norm, sum of squared entries.
pub fn frobenius_norm_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

/// Frobenius inner product `sum_ij a_ij * b_ij`. Panics on shape mismatch
/// (internal use; callers validate shapes at their boundary).
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.rows, b.rows, "frobenius_inner row mismatch");
    assert_eq!(a.cols, b.cols, "frobenius_inner col mismatch");
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central finite differences `(f(x + h e_k) - f(x - h e_k)) / (2h)` for every
/// coordinate. The oracle every analytic gradient in the crate is checked
/// against.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(CovError::domain("finite_diff_grad", format!("step h = {h} must be > 0")));
    }
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for k in 0..x.len() {
        let saved = work[k];
        work[k] = saved + h;
        let fp = f(&work);
        work[k] = saved - h;
        let fm = f(&work);
        work[k] = saved;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CovError::numeric(
                "finite_diff_grad",
                format!("non-finite evaluation at coordinate {k} (f+ = {fp}, f- = {fm})"),
            ));
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Max-norm relative disagreement between an analytic gradient and its
/// finite-difference oracle: `max_k |a_k - fd_k| / max(1, max_k |fd_k|)`.
pub fn grad_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len(), "grad_rel_err length mismatch");
    let scale = fd.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max)
        / scale
}
