//! Dense linear algebra over row-major `f64` buffers.
//!
//! Everything the rest of the crate needs lives here: matrix/vector
//! arithmetic, a least-squares solver on the normal equations with a
//! Tikhonov fallback for ill-conditioned Gram matrices, a Moore-Penrose
//! pseudoinverse built on a cyclic Jacobi eigensolver, and the elementary
//! nonlinear maps (softmax, cross-entropy) used by the model and sampler.
//! Sizes stay desk-scale, so the dense O(n^3) routines are plenty.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Gram-matrix condition estimate above which the ridge term kicks in.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;
/// Tikhonov ridge added to a numerically singular Gram matrix.
pub const GRAM_RIDGE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum LinalgError {
    /// An input contained a NaN or infinity.
    NonFinite { context: &'static str },
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Cross-entropy target index outside the logit vector.
    TargetOutOfRange { target: usize, dim: usize },
    EmptyInput { context: &'static str },
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::NonFinite { context } => {
                write!(f, "non-finite value in {context}")
            }
            LinalgError::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(f, "dimension mismatch in {context}: expected {expected}, got {got}"),
            LinalgError::TargetOutOfRange { target, dim } => {
                write!(f, "target index {target} out of range for {dim} logits")
            }
            LinalgError::EmptyInput { context } => write!(f, "empty input in {context}"),
        }
    }
}

/// Dense vector of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Vector((0..dim).map(&mut f).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }
}

/// Dense row-major matrix of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vector]) -> Self {
        let cols = rows.first().map_or(0, Vector::dim);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            debug_assert_eq!(r.dim(), cols);
            data.extend_from_slice(r.as_slice());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn column(&self, c: usize) -> Vector {
        Vector::from_fn(self.rows, |r| self.get(r, c))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.cols, x.dim());
        let mut out = Vector::zeros(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.as_slice()) {
                acc += a * b;
            }
            out.0[r] = acc;
        }
        out
    }

    /// `self^T * x`, without materialising the transpose.
    pub fn matvec_transposed(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.rows, x.dim());
        let mut out = Vector::zeros(self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let s = x.0[r];
            for (o, a) in out.0.iter_mut().zip(row) {
                *o += s * a;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let other_row = other.row(k);
                let out_row = out.row_mut(r);
                for (o, b) in out_row.iter_mut().zip(other_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Gram matrix `self^T * self`.
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in 0..self.cols {
                    out.data[i * self.cols + j] += a * row[j];
                }
            }
        }
        out
    }

    /// Rank-one update `self += s * u v^T`.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(self.rows, u.len());
        debug_assert_eq!(self.cols, v.len());
        for (r, &ur) in u.iter().enumerate() {
            let coef = s * ur;
            if coef == 0.0 {
                continue;
            }
            let row = self.row_mut(r);
            for (o, &vc) in row.iter_mut().zip(v) {
                *o += coef * vc;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns eigenvalues (unsorted sign-wise but paired with the columns of the
/// returned rotation matrix) after sweeping until the off-diagonal mass is
/// negligible. Accurate to machine precision for the small symmetric systems
/// used here.
pub fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let n = sym.rows();
    debug_assert_eq!(n, sym.cols());
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    if n <= 1 {
        return ((0..n).map(|i| a.get(i, i)).collect(), v);
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        let scale = a.frobenius_norm();
        if libm::sqrt(off) <= 1e-15 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1)).
                let t = if theta >= 0.0 {
                    1.0 / (theta + libm::sqrt(theta * theta + 1.0))
                } else {
                    -1.0 / (-theta + libm::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| a.get(i, i)).collect(), v)
}

/// Minimise `||A x - b||_2` via the normal equations.
///
/// When the Gram matrix is numerically singular (condition estimate above
/// [`GRAM_CONDITION_LIMIT`]) a ridge of [`GRAM_RIDGE`] is added, which keeps
/// the solve well-posed for rank-deficient systems such as indicator
/// matrices whose per-attribute columns sum to the all-ones vector.
pub fn solve_least_squares(a: &Matrix, b: &Vector) -> Result<Vector, LinalgError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::EmptyInput {
            context: "solve_least_squares",
        });
    }
    if a.rows() != b.dim() {
        return Err(LinalgError::DimensionMismatch {
            context: "solve_least_squares rhs",
            expected: a.rows(),
            got: b.dim(),
        });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(LinalgError::NonFinite {
            context: "solve_least_squares",
        });
    }
    let gram = a.gram();
    let rhs = a.matvec_transposed(b);
    let (eigvals, eigvecs) = jacobi_eigen(&gram);
    // Gram eigenvalues are nonnegative up to rounding.
    let lambda_max = eigvals.iter().cloned().fold(0.0_f64, f64::max);
    let lambda_min = eigvals.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
    let ill_conditioned =
        lambda_max <= 0.0 || lambda_min <= 0.0 || lambda_max / lambda_min > GRAM_CONDITION_LIMIT;
    let ridge = if ill_conditioned { GRAM_RIDGE } else { 0.0 };
    let projected = eigvecs.matvec_transposed(&rhs);
    let mut coeffs = Vector::zeros(a.cols());
    for i in 0..a.cols() {
        let lambda = eigvals[i].max(0.0) + ridge;
        if lambda > 0.0 {
            coeffs.0[i] = projected.0[i] / lambda;
        }
    }
    Ok(eigvecs.matvec(&coeffs))
}

/// Moore-Penrose pseudoinverse through the eigendecomposition of the smaller
/// Gram matrix. The rank cutoff lives in eigenvalue space: Gram eigenvalues
/// below `lambda_max * max(rows, cols) * 1e-13` are rounding noise (the Gram
/// squares the condition number) and are truncated.
pub fn pseudo_inverse(a: &Matrix) -> Matrix {
    let (n, m) = (a.rows(), a.cols());
    if n == 0 || m == 0 {
        return Matrix::zeros(m, n);
    }
    let use_cols = m <= n;
    let gram = if use_cols {
        a.gram()
    } else {
        a.transpose().gram()
    };
    let (eigvals, eigvecs) = jacobi_eigen(&gram);
    let lambda_max = eigvals.iter().cloned().fold(0.0_f64, f64::max);
    if lambda_max <= 0.0 {
        return Matrix::zeros(m, n);
    }
    let tol = lambda_max * (n.max(m) as f64) * 1e-13;
    let mut out = Matrix::zeros(m, n);
    for i in 0..gram.rows() {
        let lambda = eigvals[i];
        if lambda <= tol {
            continue;
        }
        let v_i = eigvecs.column(i);
        if use_cols {
            // A^+ = sum (1/lambda) v (A v)^T over retained eigenpairs of A^T A.
            let av = a.matvec(&v_i);
            out.add_outer(1.0 / lambda, v_i.as_slice(), av.as_slice());
        } else {
            // A^+ = sum (1/lambda) (A^T u) u^T over retained eigenpairs of A A^T.
            let atu = a.matvec_transposed(&v_i);
            out.add_outer(1.0 / lambda, atu.as_slice(), v_i.as_slice());
        }
    }
    out
}

/// Numerically stable softmax; entries are positive and sum to one.
pub fn softmax(logits: &Vector) -> Vector {
    debug_assert!(logits.dim() > 0);
    let max = logits
        .0
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vector::from_fn(logits.dim(), |i| libm::exp(logits.0[i] - max));
    let sum: f64 = out.0.iter().sum();
    for v in &mut out.0 {
        *v /= sum;
    }
    out
}

/// `log(sum_i exp(x_i))` computed against the running maximum.
pub fn log_sum_exp(logits: &Vector) -> f64 {
    let max = logits
        .0
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.0.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

/// `-log softmax(logits)[target]`, always nonnegative.
pub fn cross_entropy(logits: &Vector, target: usize) -> Result<f64, LinalgError> {
    if target >= logits.dim() {
        return Err(LinalgError::TargetOutOfRange {
            target,
            dim: logits.dim(),
        });
    }
    // Both terms are nonnegative, so the result cannot round below zero.
    let max = logits
        .0
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.0.iter().map(|&v| libm::exp(v - max)).sum();
    Ok(libm::log(sum) + (max - logits.0[target]))
}

/// Pearson correlation of two equally long samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / libm::sqrt(sxx * syy)
}

pub fn format_error_label(err: &LinalgError) -> String {
    use alloc::string::ToString;
    err.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve() {
        let a = Matrix::identity(2);
        let b = Vector(vec![3.0, 4.0]);
        let x = solve_least_squares(&a, &b).unwrap();
        assert!((x.0[0] - 3.0).abs() < 1e-12);
        assert!((x.0[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_mean() {
        let a = Matrix::from_fn(2, 1, |_, _| 1.0);
        let b = Vector(vec![1.0, 3.0]);
        let x = solve_least_squares(&a, &b).unwrap();
        assert!((x.0[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn non_finite_rejected() {
        let a = Matrix::from_fn(2, 2, |r, c| if r == c { f64::NAN } else { 0.0 });
        let b = Vector(vec![1.0, 1.0]);
        assert!(matches!(
            solve_least_squares(&a, &b),
            Err(LinalgError::NonFinite { .. })
        ));
    }

    #[test]
    fn pinv_identity() {
        let p = pseudo_inverse(&Matrix::identity(3));
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((p.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pinv_singular_diagonal() {
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 0, 2.0);
        let p = pseudo_inverse(&a);
        assert!((p.get(0, 0) - 0.5).abs() < 1e-12);
        assert!(p.get(1, 1).abs() < 1e-12);
        assert!(p.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let s = softmax(&Vector(vec![0.0, 0.0]));
        assert!((s.0[0] - 0.5).abs() < 1e-15);
        let u = softmax(&Vector(vec![1.3, 1.3, 1.3, 1.3]));
        for v in &u.0 {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let v = Vector(vec![0.3, -1.2, 2.5]);
        let shifted = Vector(v.0.iter().map(|x| x + 1000.0).collect());
        let a = softmax(&v);
        let b = softmax(&shifted);
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let v = 7usize;
        let ce = cross_entropy(&Vector(vec![0.0; v]), 3).unwrap();
        assert!((ce - libm::log(v as f64)).abs() < 1e-12);
        let ce = cross_entropy(&Vector(vec![20.0, -20.0]), 0).unwrap();
        assert!(ce.abs() < 1e-6);
        assert!(ce >= 0.0);
        assert!(cross_entropy(&Vector(vec![0.0, 0.0]), 2).is_err());
    }
}
