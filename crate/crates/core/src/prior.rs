//! Prior densities on the parameter.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::linalg::{sym_eigenvalues, symmetrize, Matrix, Vector};

pub type LogDensityFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Prior {
    Flat,
    /// Centered Gaussian `N(0, G^-2)` given by its precision `G^2`.
    Gaussian { g_sq: Matrix },
    /// User log-density, up to an additive constant.
    Custom(LogDensityFn),
}

impl fmt::Debug for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prior::Flat => write!(f, "Flat"),
            Prior::Gaussian { g_sq } => f.debug_struct("Gaussian").field("g_sq", g_sq).finish(),
            Prior::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Prior {
    pub fn gaussian(g_sq: Matrix) -> Result<Self> {
        if g_sq.nrows() != g_sq.ncols() {
            return Err(invalid("prior precision must be square"));
        }
        let g_sq = symmetrize(&g_sq);
        if sym_eigenvalues(&g_sq).first().is_some_and(|&l| l < -1e-12 * g_sq.norm().max(1.0)) {
            return Err(invalid("prior precision must be positive semidefinite"));
        }
        Ok(Prior::Gaussian { g_sq })
    }

    /// `G^2 = g I_p`.
    pub fn isotropic(p: usize, g: f64) -> Result<Self> {
        if !(g >= 0.0) {
            return Err(invalid(format!("prior precision must be nonnegative, got {g}")));
        }
        Self::gaussian(Matrix::identity(p, p) * g)
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, Prior::Flat)
    }

    pub fn log_density(&self, theta: &Vector) -> f64 {
        match self {
            Prior::Flat => 0.0,
            Prior::Gaussian { g_sq } => -0.5 * theta.dot(&(g_sq * theta)),
            Prior::Custom(f) => f(theta),
        }
    }

    /// Precision matrix for the Gaussian kind; zero for flat.
    pub fn precision(&self, p: usize) -> Option<Matrix> {
        match self {
            Prior::Flat => Some(Matrix::zeros(p, p)),
            Prior::Gaussian { g_sq } => Some(g_sq.clone()),
            Prior::Custom(_) => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Prior::Flat => "flat",
            Prior::Gaussian { .. } => "gaussian",
            Prior::Custom(_) => "custom",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_prior_density() {
        let p = Prior::isotropic(2, 4.0).unwrap();
        let th = Vector::from_vec(vec![1.0, 0.5]);
        assert!((p.log_density(&th) + 0.5 * 4.0 * 1.25).abs() < 1e-15);
        assert_eq!(Prior::Flat.log_density(&th), 0.0);
        assert!(Prior::gaussian(Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]))).is_err());
    }
}
