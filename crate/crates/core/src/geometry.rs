//! Local geometry around the best parametric fit: `theta*`, the information
//! matrices, the identifiability constant, the standardized score and the
//! single-matrix bracketing pair.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, BvmError, Result};
use crate::linalg::{
    cholesky, power_iteration, spd_inv_sqrt, spd_inverse, spd_sqrt, sym_eigenvalues, symmetrize, Matrix, Vector,
    DENSE_EIGEN_LIMIT,
};
use crate::model::{self, Dataset, QuasiModel, TrueProcess};
use crate::optimize::{newton_maximize, Evaluation, NewtonOptions};

/// Default multiplier in `r0^2 = c (1 + a^2)(p + x_n)`.
pub const DEFAULT_R0_NORMALIZATION: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryOptions {
    /// Deviation exponent; defaults to `p`.
    pub x_n: Option<f64>,
    pub r0_normalization: f64,
    /// Explicit locality radius overriding the default rule.
    pub r0: Option<f64>,
    pub newton: NewtonOptions,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self {
            x_n: None,
            r0_normalization: DEFAULT_R0_NORMALIZATION,
            r0: None,
            newton: NewtonOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGeometry {
    pub p: usize,
    pub n: usize,
    pub theta_star: Vector,
    pub theta_star_on_boundary: bool,
    pub d0_sq: Matrix,
    /// Symmetric square root of `d0_sq`.
    pub d0: Matrix,
    pub d0_inv: Matrix,
    pub v0_sq: Matrix,
    pub a_sq: f64,
    /// Power-iteration estimate of `a_sq`, kept as a cross-check.
    pub a_sq_power: f64,
    pub r0: f64,
    pub x_n: f64,
    pub r0_normalization: f64,
    /// `p + E|xi|^2 = p + tr(D0^-1 V0^2 D0^-1)`.
    pub q_star: f64,
}

impl LocalGeometry {
    /// Assemble the geometry from given matrices (used for synthetic
    /// scenarios and by [`compute_geometry`]).
    pub fn from_parts(
        theta_star: Vector,
        n: usize,
        d0_sq: Matrix,
        v0_sq: Matrix,
        opts: &GeometryOptions,
    ) -> Result<Self> {
        let p = theta_star.len();
        if d0_sq.nrows() != p || v0_sq.nrows() != p {
            return Err(BvmError::DimensionMismatch {
                expected: p,
                got: d0_sq.nrows(),
            });
        }
        let d0_sq = symmetrize(&d0_sq);
        let v0_sq = symmetrize(&v0_sq);
        cholesky(&d0_sq, "total Fisher matrix")?;
        let d0 = spd_sqrt(&d0_sq, "total Fisher matrix")?;
        let d0_inv = spd_inv_sqrt(&d0_sq, "total Fisher matrix")?;
        let sandwich = symmetrize(&(&d0_inv * &v0_sq * &d0_inv));
        let a_sq_power = power_iteration(&sandwich, 1e-10, 10_000).max(0.0);
        let a_sq = if p <= DENSE_EIGEN_LIMIT {
            sym_eigenvalues(&sandwich).last().copied().unwrap_or(0.0).max(0.0)
        } else {
            a_sq_power
        };
        let x_n = opts.x_n.unwrap_or(p as f64);
        if !(x_n > 0.0) {
            return Err(invalid("deviation exponent x_n must be positive"));
        }
        let r0 = match opts.r0 {
            Some(r) if r > 0.0 => r,
            Some(r) => return Err(invalid(format!("locality radius must be positive, got {r}"))),
            None => (opts.r0_normalization * (1.0 + a_sq) * (p as f64 + x_n)).sqrt(),
        };
        Ok(Self {
            p,
            n,
            theta_star,
            theta_star_on_boundary: false,
            q_star: p as f64 + sandwich.trace(),
            d0_sq,
            d0,
            d0_inv,
            v0_sq,
            a_sq,
            a_sq_power,
            r0,
            x_n,
            r0_normalization: opts.r0_normalization,
        })
    }

    /// `D0^-1 V0^2 D0^-1`, the covariance of the standardized score.
    pub fn sandwich(&self) -> Matrix {
        symmetrize(&(&self.d0_inv * &self.v0_sq * &self.d0_inv))
    }

    /// `|D0 (theta - theta*)|`.
    pub fn local_radius(&self, theta: &Vector) -> f64 {
        (&self.d0 * (theta - &self.theta_star)).norm()
    }

    /// Map standardized coordinates `u = D0 (theta - theta*)` back to `theta`.
    pub fn from_standardized(&self, u: &Vector) -> Vector {
        &self.theta_star + &self.d0_inv * u
    }
}

/// Maximizer of the expected criterion over the domain box.
pub fn solve_theta_star(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    n: usize,
    opts: &NewtonOptions,
) -> Result<(Vector, bool)> {
    let init = Vector::zeros(model.dim());
    let eval = |theta: &Vector| -> Result<Evaluation> {
        Ok(Evaluation {
            value: model::expected_loglik(model, truth, n, theta)?.value,
            grad: model::expected_score(model, truth, n, theta)?,
            hess: model::expected_hessian(model, truth, n, theta)?,
        })
    };
    let r = newton_maximize(eval, &init, model.domain(), opts)?;
    if !r.converged {
        return Err(BvmError::NoConvergence {
            iterations: r.iterations,
            grad_norm: r.grad_norm,
            last: r.x,
        });
    }
    Ok((r.point(), r.on_boundary))
}

/// `D0^2 = -grad^2 E L(theta*)` and `V0^2 = Var(grad L(theta*))`.
pub fn info_matrices(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    n: usize,
    theta_star: &Vector,
) -> Result<(Matrix, Matrix)> {
    let d0_sq = -model::expected_hessian(model, truth, n, theta_star)?;
    cholesky(&d0_sq, "total Fisher matrix")?;
    model.domain().check(theta_star)?;
    let v0_sq = symmetrize(&model.eval_score_covariance(truth, n, theta_star)?);
    Ok((d0_sq, v0_sq))
}

/// Smallest `a^2` with `a^2 D0^2 >= V0^2`.
pub fn identifiability_a2(d0_sq: &Matrix, v0_sq: &Matrix) -> Result<f64> {
    let inv = spd_inv_sqrt(d0_sq, "total Fisher matrix")?;
    let m = symmetrize(&(&inv * v0_sq * &inv));
    Ok(power_iteration(&m, 1e-10, 10_000).max(0.0))
}

pub fn compute_geometry(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    n: usize,
    opts: &GeometryOptions,
) -> Result<LocalGeometry> {
    let (theta_star, on_boundary) = solve_theta_star(model, truth, n, &opts.newton)?;
    let (d0_sq, v0_sq) = info_matrices(model, truth, n, &theta_star)?;
    let mut geom = LocalGeometry::from_parts(theta_star, n, d0_sq, v0_sq, opts)?;
    geom.theta_star_on_boundary = on_boundary;
    Ok(geom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreState {
    /// `grad L(theta*)`.
    pub grad: Vector,
    /// `D0^-1 grad L(theta*)`.
    pub xi: Vector,
    /// `theta* + D0^-2 grad L(theta*)`.
    pub theta_circ: Vector,
    /// `p + |xi|^2`.
    pub q: f64,
}

impl ScoreState {
    pub fn from_gradient(geom: &LocalGeometry, grad: Vector) -> Result<Self> {
        let step = cholesky(&geom.d0_sq, "total Fisher matrix")?.solve(&grad);
        let xi = &geom.d0 * &step;
        let theta_circ = &geom.theta_star + &step;
        let q = geom.p as f64 + xi.norm_squared();
        Ok(Self {
            grad,
            xi,
            theta_circ,
            q,
        })
    }
}

pub fn score_state(model: &dyn QuasiModel, data: &Dataset, geom: &LocalGeometry) -> Result<ScoreState> {
    let grad = model::score(model, data, &geom.theta_star)?;
    ScoreState::from_gradient(geom, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub theta_hat: Vector,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub on_boundary: bool,
}

/// Local maximizer of `L` on the data. A run that ends on the box boundary is
/// reported as not converged.
pub fn solve_mle(model: &dyn QuasiModel, data: &Dataset, init: &Vector, opts: &NewtonOptions) -> Result<MleResult> {
    let eval = |theta: &Vector| -> Result<Evaluation> {
        Ok(Evaluation {
            value: model::log_lik(model, data, theta)?,
            grad: model::score(model, data, theta)?,
            hess: model::observed_hessian(model, data, theta)?,
        })
    };
    let r = newton_maximize(eval, init, model.domain(), opts)?;
    Ok(MleResult {
        theta_hat: r.point(),
        converged: r.converged && !r.on_boundary,
        grad_norm: r.grad_norm,
        iterations: r.iterations,
        on_boundary: r.on_boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Upper,
    Lower,
}

/// Quadratic brackets with matrices `(1 -+ rd) D0^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketPair {
    pub rd: f64,
    pub d_ub_sq: Matrix,
    pub d_lb_sq: Matrix,
    pub xi_ub: Vector,
    pub xi_lb: Vector,
    pub theta_ub: Vector,
    pub theta_lb: Vector,
    /// `D0 (theta_circ - theta_ub)`.
    pub delta_rd_vec: Vector,
    /// `sqrt(1 - rd)` and `sqrt(1 + rd)`.
    pub scale_ub: f64,
    pub scale_lb: f64,
}

pub fn bracket_pair(geom: &LocalGeometry, state: &ScoreState, rd: f64) -> Result<BracketPair> {
    if !(0.0..1.0).contains(&rd) {
        return Err(invalid(format!("bracketing constant must lie in [0, 1), got {rd}")));
    }
    let scale_ub = (1.0 - rd).sqrt();
    let scale_lb = (1.0 + rd).sqrt();
    // D_rd = sqrt(1 -+ rd) D0 commutes with D0, so every object is a scalar
    // rescaling of its rd = 0 counterpart
    let step = &state.theta_circ - &geom.theta_star;
    let theta_ub = &geom.theta_star + &step / (1.0 - rd);
    let theta_lb = &geom.theta_star + &step / (1.0 + rd);
    let delta_rd_vec = &geom.d0 * (&state.theta_circ - &theta_ub);
    let pair = BracketPair {
        rd,
        d_ub_sq: &geom.d0_sq * (1.0 - rd),
        d_lb_sq: &geom.d0_sq * (1.0 + rd),
        xi_ub: &state.xi / scale_ub,
        xi_lb: &state.xi / scale_lb,
        theta_ub,
        theta_lb,
        delta_rd_vec,
        scale_ub,
        scale_lb,
    };
    if rd <= 0.5 {
        let bound = 2.0 * rd * state.xi.norm();
        let got = pair.delta_rd_vec.norm();
        debug_assert!(got <= bound * (1.0 + 1e-12) + 1e-300, "|delta_rd| = {got} exceeds {bound}");
    }
    Ok(pair)
}

/// `Lambda_rd(theta, theta*) = xi_rd^T D_rd h - |D_rd h|^2 / 2`, `h = theta - theta*`.
pub fn bracket_quadratic(geom: &LocalGeometry, pair: &BracketPair, side: Side, theta: &Vector) -> f64 {
    let u = &geom.d0 * (theta - &geom.theta_star);
    bracket_quadratic_std(pair, side, &u)
}

/// Bracket value in standardized coordinates `u = D0 (theta - theta*)`.
pub fn bracket_quadratic_std(pair: &BracketPair, side: Side, u: &Vector) -> f64 {
    let (scale, xi) = match side {
        Side::Upper => (pair.scale_ub, &pair.xi_ub),
        Side::Lower => (pair.scale_lb, &pair.xi_lb),
    };
    let w = u * scale;
    xi.dot(&w) - 0.5 * w.norm_squared()
}

pub fn local_membership(geom: &LocalGeometry, theta: &Vector) -> bool {
    geom.local_radius(theta) <= geom.r0
}

/// `|D_ub (theta_hat - theta*) - xi_ub|^2`.
pub fn mle_expansion_check(geom: &LocalGeometry, pair: &BracketPair, mle: &MleResult) -> f64 {
    let u = &geom.d0 * (&mle.theta_hat - &geom.theta_star) * pair.scale_ub;
    (u - &pair.xi_ub).norm_squared()
}

/// Inverse of `D0^2`, symmetric.
pub fn d0_inverse_sq(geom: &LocalGeometry) -> Result<Matrix> {
    spd_inverse(&geom.d0_sq, "total Fisher matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Covariates, GlmModel, ResponseLaw};
    use crate::rng::RngStream;
    use std::sync::Arc;

    fn scalar(v: f64) -> Vector {
        Vector::from_vec(vec![v])
    }

    fn gaussian_mean(n: usize, mean: f64, sd: f64) -> (GlmModel, TrueProcess) {
        (
            GlmModel::gaussian_linear(1, 1.0).unwrap(),
            TrueProcess {
                response: ResponseLaw::GaussianNoise { sd },
                coef: scalar(mean),
                covariates: Covariates::intercept(n),
                matches_model: sd == 1.0,
            },
        )
    }

    #[test]
    fn gaussian_mean_theta_star_and_information() {
        let (m, t) = gaussian_mean(10, 2.0, 3.0);
        let (ts, _) = solve_theta_star(&m, &t, 10, &NewtonOptions::default()).unwrap();
        assert!((ts[0] - 2.0).abs() < 1e-12);
        let (d, v) = info_matrices(&m, &gaussian_mean(10, 2.0, 2.0).1, 10, &ts).unwrap();
        assert_eq!(d[(0, 0)], 10.0);
        assert!((v[(0, 0)] - 40.0).abs() < 1e-12);
        let (d, v) = info_matrices(&m, &gaussian_mean(10, 2.0, 1.0).1, 10, &ts).unwrap();
        assert_eq!((d[(0, 0)], v[(0, 0)]), (10.0, 10.0));
    }

    #[test]
    fn logistic_theta_star_recovers_truth() {
        let m = GlmModel::logistic(3).unwrap();
        let t = TrueProcess {
            response: ResponseLaw::Bernoulli { flip: 0.0 },
            coef: Vector::from_vec(vec![0.7, -1.2, 0.4]),
            covariates: Covariates::Gaussian { p: 3, scale: 1.0 },
            matches_model: true,
        };
        let (ts, _) = solve_theta_star(&m, &t, 400, &NewtonOptions::default()).unwrap();
        assert!((ts - &t.coef).norm() < 1e-8);
        let (d, _) = info_matrices(&m, &t, 400, &t.coef).unwrap();
        let (d1, _) = info_matrices(&m, &t, 1, &t.coef).unwrap();
        assert!((d - d1 * 400.0).norm() < 1e-10 * 400.0);
    }

    #[test]
    fn a2_examples() {
        let i = Matrix::identity(2, 2);
        assert!((identifiability_a2(&i, &i).unwrap() - 1.0).abs() < 1e-10);
        let v = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0]));
        assert!((identifiability_a2(&i, &v).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn score_state_examples() {
        let data = Dataset::new(Matrix::from_element(4, 1, 1.0), Vector::from_vec(vec![1.0, 2.0, 3.0, 2.0])).unwrap();
        let m = GlmModel::gaussian_linear(1, 1.0).unwrap();
        let opts = GeometryOptions::default();
        let geom = LocalGeometry::from_parts(scalar(2.0), 4, Matrix::from_element(1, 1, 4.0), Matrix::from_element(1, 1, 4.0), &opts).unwrap();
        let s = score_state(&m, &data, &geom).unwrap();
        assert_eq!((s.xi[0], s.theta_circ[0], s.q), (0.0, 2.0, 1.0));
        let geom = LocalGeometry { theta_star: scalar(1.5), ..geom };
        let s = score_state(&m, &data, &geom).unwrap();
        assert!((s.grad[0] - 2.0).abs() < 1e-12);
        assert!((s.xi[0] - 1.0).abs() < 1e-12);
        assert!((s.theta_circ[0] - 2.0).abs() < 1e-12);
        let mle = solve_mle(&m, &data, &scalar(0.0), &NewtonOptions::default()).unwrap();
        assert!(mle.converged);
        assert!((mle.theta_hat[0] - s.theta_circ[0]).abs() < 1e-12);
        let pair = bracket_pair(&geom, &s, 0.0).unwrap();
        assert!(mle_expansion_check(&geom, &pair, &mle) < 1e-24);
    }

    #[test]
    fn bracket_pair_arithmetic() {
        let opts = GeometryOptions::default();
        let geom = LocalGeometry::from_parts(scalar(0.0), 1, Matrix::from_element(1, 1, 4.0), Matrix::from_element(1, 1, 4.0), &opts).unwrap();
        let s = ScoreState::from_gradient(&geom, scalar(2.0)).unwrap();
        let pair = bracket_pair(&geom, &s, 0.1).unwrap();
        assert!((pair.d_ub_sq[(0, 0)] - 3.6).abs() < 1e-12);
        assert!((pair.xi_ub[0] - 2.0 / 3.6f64.sqrt()).abs() < 1e-12);
        assert!((pair.theta_ub[0] - 2.0 / 3.6).abs() < 1e-12);
        let val = bracket_quadratic(&geom, &pair, Side::Upper, &scalar(1.0));
        assert!((val - (2.0 - 1.8)).abs() < 1e-12);
        let top = bracket_quadratic(&geom, &pair, Side::Upper, &pair.theta_ub.clone());
        assert!((top - pair.xi_ub.norm_squared() / 2.0).abs() < 1e-12);
        assert_eq!(bracket_quadratic(&geom, &pair, Side::Lower, &scalar(0.0)), 0.0);
        let zero = bracket_pair(&geom, &s, 0.0).unwrap();
        assert_eq!(zero.theta_ub, zero.theta_lb);
        assert!(zero.delta_rd_vec.norm() < 1e-15);
        assert!(bracket_pair(&geom, &s, 1.0).is_err());
    }

    #[test]
    fn least_squares_mle_matches_normal_equations() {
        let x = Covariates::fixed_gaussian(30, 3, RngStream::new(1, 0));
        let t = TrueProcess {
            response: ResponseLaw::GaussianNoise { sd: 1.0 },
            coef: Vector::from_vec(vec![1.0, 0.0, -1.0]),
            covariates: x,
            matches_model: true,
        };
        let d = model::sample_dataset(&t, 30, RngStream::new(1, 1)).unwrap();
        let m = GlmModel::gaussian_linear(3, 1.0).unwrap();
        let r = solve_mle(&m, &d, &Vector::zeros(3), &NewtonOptions::default()).unwrap();
        let xtx = d.x.tr_mul(&d.x);
        let ls = xtx.cholesky().unwrap().solve(&d.x.tr_mul(&d.y));
        assert!((r.theta_hat - ls).norm() < 1e-10);
    }

    #[test]
    fn separable_logistic_does_not_converge() {
        let x = Matrix::from_row_slice(4, 1, &[-2.0, -1.0, 1.0, 2.0]);
        let d = Dataset {
            x: Arc::new(x),
            y: Vector::from_vec(vec![0.0, 0.0, 1.0, 1.0]),
            seed_record: None,
        };
        let m = GlmModel::logistic(1).unwrap();
        let r = solve_mle(&m, &d, &scalar(0.0), &NewtonOptions::default()).unwrap();
        assert!(!r.converged);
    }
}
