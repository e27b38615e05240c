//! Small dense linear algebra: row-major matrices, products, determinant and
//! Householder QR. Sizes here are tiny (rotation keys, layer weights), so
//! everything is straightforward loops over `Vec<f64>`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seed;

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, scale²), filled in row-major order.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, seed: Seed) -> Self {
        let mut rng = seed.rng();
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Determinant by LU decomposition with partial pivoting.
    pub fn determinant(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(Error::shape("determinant of a non-square matrix"));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap_or(col);
            if a[pivot * n + col] == 0.0 {
                return Ok(0.0);
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(pivot * n + k, col * n + k);
                }
                det = -det;
            }
            let p = a[col * n + col];
            det *= p;
            for r in col + 1..n {
                let factor = a[r * n + col] / p;
                if factor != 0.0 {
                    for k in col..n {
                        a[r * n + k] -= factor * a[col * n + k];
                    }
                }
            }
        }
        Ok(det)
    }

    /// Householder QR of a square matrix: returns `(Q, R)` with `Q` orthogonal
    /// and `R` upper triangular, `self = Q·R`.
    pub fn qr(&self) -> Result<(Matrix, Matrix)> {
        self.householder_qr().map(|(q, r, _)| (q, r))
    }

    /// QR plus the number of reflections applied, so `det(Q) = (-1)^count`.
    pub(crate) fn householder_qr(&self) -> Result<(Matrix, Matrix, usize)> {
        if self.rows != self.cols {
            return Err(Error::shape("qr expects a square matrix"));
        }
        let n = self.rows;
        let mut r = self.clone();
        let mut q = Matrix::identity(n);
        let mut v = vec![0.0; n];
        let mut reflections = 0;
        for k in 0..n.saturating_sub(1) {
            let v = &mut v[..n - k];
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = r.data[(k + i) * n + k];
            }
            let norm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v[0] -= if v[0] >= 0.0 { -norm } else { norm };
            let vnorm2: f64 = v.iter().map(|t| t * t).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            reflections += 1;
            let scale = 2.0 / vnorm2;
            // R <- (I - 2vvᵀ/vᵀv) R on rows k..n
            for c in 0..n {
                let s = v
                    .iter()
                    .enumerate()
                    .map(|(i, vi)| vi * r.data[(k + i) * n + c])
                    .sum::<f64>()
                    * scale;
                for (i, vi) in v.iter().enumerate() {
                    r.data[(k + i) * n + c] -= s * vi;
                }
            }
            // Q <- Q (I - 2vvᵀ/vᵀv) on columns k..n
            for row in q.data.chunks_exact_mut(n) {
                let tail = &mut row[k..];
                let s = tail.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() * scale;
                tail.iter_mut().zip(v.iter()).for_each(|(a, b)| *a -= s * b);
            }
        }
        for i in 1..n {
            for j in 0..i {
                r.set(i, j, 0.0);
            }
        }
        Ok((q, r, reflections))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinant_known_values() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        assert!((m.determinant().unwrap() - 5.0).abs() < 1e-14);
        let p = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!((p.determinant().unwrap() + 1.0).abs() < 1e-14);
        assert_eq!(Matrix::identity(4).determinant().unwrap(), 1.0);
    }

    #[test]
    fn qr_reconstructs_and_is_orthogonal() {
        for s in 0..20 {
            let a = Matrix::random_normal(5, 5, 1.0, Seed(s));
            let (q, r) = a.qr().unwrap();
            let back = q.matmul(&r).unwrap();
            assert!(back.max_abs_diff(&a) < 1e-12);
            let qtq = q.transpose().matmul(&q).unwrap();
            assert!(qtq.max_abs_diff(&Matrix::identity(5)) < 1e-13);
            for i in 0..5 {
                for j in 0..i {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }
}
