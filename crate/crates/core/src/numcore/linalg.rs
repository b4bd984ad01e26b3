//! Small dense linear-algebra helpers: Cholesky factorization and
//! symmetric eigendecomposition (the latter via nalgebra).

use crate::error::{Result, SbiError};
use crate::numcore::array::Array;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub struct CholeskyFactor {
    n: usize,
    /// Row-major lower triangle, full n×n storage.
    l: Vec<f64>,
}

/// Factor `a = L Lᵀ`. Fails if a pivot is not strictly positive.
pub fn cholesky(a: &Array) -> Result<CholeskyFactor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(SbiError::InvalidArgument("cholesky: non-square".into()));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get2(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(SbiError::CholeskyFailure(format!(
                        "non-positive pivot {s:.3e} at index {i}"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(CholeskyFactor { n, l })
}

impl CholeskyFactor {
    /// Solve `A x = b` via forward/backward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }

    /// log |A|^(1/2) = Σ log L_ii.
    pub fn log_det_sqrt(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum()
    }

    /// Solve `L y = b` only (for sampling: x = μ + L z).
    pub fn lower_mul(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..=i {
                s += self.l[i * n + k] * z[k];
            }
            out[i] = s;
        }
        out
    }
}

/// Eigendecomposition of a symmetric matrix. Returns eigenvalues in
/// descending order with matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Array) -> (Vec<f64>, Array) {
    let n = a.rows();
    assert_eq!(a.cols(), n, "symmetric_eigen: non-square");
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.data());
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Array::zeros(&[n, n]);
    for (out_col, &src_col) in order.iter().enumerate() {
        for row in 0..n {
            vecs.set2(row, out_col, eig.eigenvectors[(row, src_col)]);
        }
    }
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solve_identity() {
        let a = Array::matrix(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let chol = cholesky(&a).unwrap();
        let x = chol.solve(&[8.0, 7.0]);
        // A x = b  =>  x = [4*x0+2*x1=8, 2*x0+3*x1=7] => x = (1.25, 1.5)
        assert!((4.0 * x[0] + 2.0 * x[1] - 8.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Array::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn eigen_of_diagonal() {
        let a = Array::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]);
        let (vals, _) = symmetric_eigen(&a);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
    }
}
