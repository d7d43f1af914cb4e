//! Dense symmetric linear algebra helpers over `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{BvmError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Dimension above which spectral norms switch to power iteration.
pub const DENSE_EIGEN_LIMIT: usize = 64;

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Cholesky factorization; failure is a hard error carrying the spectrum.
pub fn cholesky(m: &Matrix, context: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| BvmError::NotPositiveDefinite {
        context: context.to_string(),
        eigenvalues: sym_eigenvalues(m),
    })
}

pub fn spd_solve(m: &Matrix, b: &Vector, context: &str) -> Result<Vector> {
    Ok(cholesky(m, context)?.solve(b))
}

pub fn spd_inverse(m: &Matrix, context: &str) -> Result<Matrix> {
    Ok(symmetrize(&cholesky(m, context)?.inverse()))
}

fn spectral_map(m: &Matrix, context: &str, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
        return Err(BvmError::NotPositiveDefinite {
            context: context.to_string(),
            eigenvalues: sym_eigenvalues(m),
        });
    }
    let d = Matrix::from_diagonal(&eig.eigenvalues.map(f));
    Ok(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// Symmetric square root of an SPD matrix.
pub fn spd_sqrt(m: &Matrix, context: &str) -> Result<Matrix> {
    spectral_map(m, context, f64::sqrt)
}

/// Symmetric inverse square root of an SPD matrix.
pub fn spd_inv_sqrt(m: &Matrix, context: &str) -> Result<Matrix> {
    spectral_map(m, context, |l| 1.0 / l.sqrt())
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(m: &Matrix, tol: f64, max_iter: usize) -> f64 {
    let p = m.nrows();
    if p == 0 {
        return 0.0;
    }
    let mut v = Vector::from_fn(p, |i, _| 1.0 + 0.1 * i as f64 / p as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Spectral norm (largest absolute eigenvalue) of a symmetric matrix.
pub fn sym_op_norm(m: &Matrix) -> f64 {
    if m.nrows() <= DENSE_EIGEN_LIMIT {
        sym_eigenvalues(m).iter().fold(0.0f64, |acc, l| acc.max(l.abs()))
    } else {
        // |M| spectral norm from the PSD matrix M^2
        power_iteration(&(m * m), 1e-12, 10_000).max(0.0).sqrt()
    }
}

/// Nearest PSD matrix in Frobenius norm; the flag reports whether any
/// eigenvalue had to be clipped.
pub fn project_psd(m: &Matrix) -> (Matrix, bool) {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (symmetrize(m), false);
    }
    let d = Matrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    (
        symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())),
        true,
    )
}

pub fn is_symmetric(m: &Matrix) -> bool {
    m.nrows() == m.ncols() && (0..m.nrows()).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = Matrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = spd_sqrt(&m, "test").unwrap();
        assert!((&r * &r - &m).norm() < 1e-12);
        let ri = spd_inv_sqrt(&m, "test").unwrap();
        assert!((&ri * &m * &ri - Matrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn not_pd_is_hard_error() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky(&m, "x"),
            Err(BvmError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn power_iteration_agrees_with_eigen() {
        let m = Matrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        let top = *sym_eigenvalues(&m).last().unwrap();
        assert!((power_iteration(&m, 1e-14, 100_000) - top).abs() < 1e-10);
    }

    #[test]
    fn psd_projection_clips_negative_modes() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let (p, flagged) = project_psd(&m);
        assert!(flagged);
        assert_eq!(p[(1, 1)], 0.0);
    }
}
