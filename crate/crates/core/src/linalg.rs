//! Dense row-major matrices over `f64`.
//!
//! Every reduction accumulates in row-major index order starting from `0.0`, so
//! results are bit-reproducible across runs and thread counts.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result, SltError};
use crate::rng::RngStream;

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let acc = &mut out[i * m..(i + 1) * m];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b = other.row(k);
                for (o, &bv) in acc.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Matrix { rows: n, cols: m, data: out })
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(invalid(format!(
                "matmul_t shape mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j))))
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows).map(|i| norm2(self.row(i))).fold(0.0, f64::max)
    }

    /// Stack `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(invalid("vstack column mismatch"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    /// Column block `[start, start + len)`.
    pub fn columns(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn max_norm(m: &Matrix) -> f64 {
    m.data.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs()))
}

pub fn sample_uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("sample dimensions must be positive, got {rows}x{cols}")));
    }
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(invalid(format!("sampling bound must be finite and non-negative, got {bound}")));
    }
    let data = (0..rows * cols).map(|_| rng.symmetric(bound)).collect();
    Matrix::new(rows, cols, data)
}

/// Largest singular value via power iteration on `m^T m`.
///
/// Starts from the row of `m` with the largest norm, which is never in the
/// null space of `m^T m`. Converged when successive Rayleigh quotients agree to
/// relative tolerance `tol`.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(invalid("spectral_norm tolerance must be positive"));
    }
    if m.is_zero() {
        return Ok(0.0);
    }
    let start = (0..m.rows)
        .max_by(|&a, &b| norm2(m.row(a)).total_cmp(&norm2(m.row(b))).then(b.cmp(&a)))
        .unwrap_or(0);
    let mut v = m.row(start).to_vec();
    normalize(&mut v);
    let mut lambda = 0.0_f64;
    for iter in 0..max_iter {
        // w = m^T (m v)
        let mv: Vec<f64> = (0..m.rows).map(|i| dot(m.row(i), &v)).collect();
        let mut w = vec![0.0; m.cols];
        for (i, &s) in mv.iter().enumerate() {
            for (wj, &a) in w.iter_mut().zip(m.row(i)) {
                *wj += a * s;
            }
        }
        let next = dot(&v, &w);
        let wn = norm2(&w);
        if wn == 0.0 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        if iter > 0 && (next - lambda).abs() <= tol * next.abs() {
            return Ok(next.max(0.0).sqrt());
        }
        lambda = next;
    }
    Err(SltError::ConvergenceFailure { estimate: lambda.max(0.0).sqrt(), iterations: max_iter })
}

/// [`spectral_norm`] with the crate-wide tolerance and iteration cap.
pub fn spectral_norm_default(m: &Matrix) -> Result<f64> {
    spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITER)
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bound_gives_zero_matrix() {
        let mut rng = RngStream::new(42);
        let m = sample_uniform_matrix(2, 2, 0.0, &mut rng).unwrap();
        assert!(m.is_zero());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_uniform_matrix(3, 3, 1.0, &mut RngStream::new(7)).unwrap();
        let b = sample_uniform_matrix(3, 3, 1.0, &mut RngStream::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_rejects_empty_dims() {
        let mut rng = RngStream::new(1);
        assert!(matches!(sample_uniform_matrix(0, 3, 1.0, &mut rng), Err(SltError::InvalidArgument(_))));
        assert!(sample_uniform_matrix(3, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_moments() {
        let m = sample_uniform_matrix(1000, 1000, 1.0, &mut RngStream::new(1)).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.32..=0.35).contains(&var), "var {var}");
        assert!(max_norm(&m) <= 1.0);
    }

    #[test]
    fn spectral_norm_simple() {
        assert!((spectral_norm_default(&Matrix::identity(3)).unwrap() - 1.0).abs() < 1e-12);
        assert!((spectral_norm_default(&Matrix::diag(&[2.0, 1.0])).unwrap() - 2.0).abs() < 1e-10);
        assert_eq!(spectral_norm_default(&Matrix::zeros(3, 2)).unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_reports_non_convergence() {
        let m = sample_uniform_matrix(5, 5, 1.0, &mut RngStream::new(3)).unwrap();
        match spectral_norm(&m, 1e-300, 3) {
            Err(SltError::ConvergenceFailure { estimate, iterations }) => {
                assert_eq!(iterations, 3);
                assert!(estimate > 0.0);
            }
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn max_norm_examples() {
        assert_eq!(max_norm(&Matrix::zeros(2, 2)), 0.0);
        let m = Matrix::from_rows(&[vec![-3.0, 1.0], vec![2.0, 0.5]]).unwrap();
        assert_eq!(max_norm(&m), 3.0);
    }

    #[test]
    fn identity_is_neutral() {
        let a = sample_uniform_matrix(3, 4, 1.0, &mut RngStream::new(2)).unwrap();
        assert_eq!(a.matmul(&Matrix::identity(4)).unwrap(), a);
    }

    #[test]
    fn transpose_of_product_on_integers() {
        let a = Matrix::from_fn(3, 4, |i, j| (i as f64) * 2.0 - j as f64);
        let b = Matrix::from_fn(4, 2, |i, j| (i + 3 * j) as f64 - 4.0);
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn schoolbook_product() {
        let mut rng = RngStream::new(5);
        let a = sample_uniform_matrix(3, 3, 1.0, &mut rng).unwrap();
        let b = sample_uniform_matrix(3, 3, 1.0, &mut rng).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(c.get(i, j), s);
            }
        }
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(SltError::InvalidArgument(_))));
        assert!(a.add(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn constructor_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }
}
