//! Quasi-likelihood models, the data-generating process and datasets.
//!
//! A [`QuasiModel`] evaluates `L(theta)` and its derivatives on a dataset and,
//! when it can, the expectation of those quantities under a [`TrueProcess`].
//! The checked free functions in this module validate dimensions and the
//! domain box before dispatching to the model.

mod glm;
mod montecarlo;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Cauchy, Distribution, Gamma, Poisson, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{BvmError, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::RngStream;

pub use glm::GlmModel;
pub use montecarlo::{MonteCarloExpectations, DEFAULT_MC_REPLICATIONS};

/// Built-in family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianLinear,
    Logistic,
    Poisson,
    Custom,
}

/// Per-coordinate admissible interval for theta. Points outside are rejected,
/// never clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub const DEFAULT_HALF_WIDTH: f64 = 50.0;

    pub fn symmetric(p: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; p],
            hi: vec![half_width; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, theta: &Vector) -> bool {
        self.check(theta).is_ok()
    }

    pub fn check(&self, theta: &Vector) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(BvmError::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        for (i, &t) in theta.iter().enumerate() {
            if !t.is_finite() || t < self.lo[i] || t > self.hi[i] {
                return Err(BvmError::DomainViolation {
                    index: i,
                    value: t,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        Ok(())
    }

    /// True when some coordinate sits within `tol` of a face.
    pub fn on_boundary(&self, theta: &Vector, tol: f64) -> bool {
        theta
            .iter()
            .enumerate()
            .any(|(i, &t)| (t - self.lo[i]).abs() <= tol || (self.hi[i] - t).abs() <= tol)
    }
}

/// Covariate law of the data-generating process.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariates {
    /// Deterministic design; expectations condition on it.
    Fixed(Arc<Matrix>),
    /// Rows drawn i.i.d. from `N(0, scale^2 I_p)`.
    Gaussian { p: usize, scale: f64 },
}

impl Covariates {
    pub fn dim(&self) -> usize {
        match self {
            Covariates::Fixed(x) => x.ncols(),
            Covariates::Gaussian { p, .. } => *p,
        }
    }

    /// Intercept-only design of `n` rows.
    pub fn intercept(n: usize) -> Self {
        Covariates::Fixed(Arc::new(Matrix::from_element(n, 1, 1.0)))
    }

    /// Fixed design with standard normal entries drawn from `stream`.
    pub fn fixed_gaussian(n: usize, p: usize, stream: RngStream) -> Self {
        let mut rng = stream.rng();
        let x = Matrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        Covariates::Fixed(Arc::new(x))
    }
}

/// Conditional law of a response given its linear index `u = x^T beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResponseLaw {
    /// `y = u + sd * N(0, 1)`.
    GaussianNoise { sd: f64 },
    /// `y = u + scale * t_df`.
    StudentNoise { df: f64, scale: f64 },
    /// `y = u + scale * Cauchy`.
    CauchyNoise { scale: f64 },
    /// Logistic success probability with symmetric label flips:
    /// `P(y = 1) = flip + (1 - 2 flip) sigmoid(u)`.
    Bernoulli { flip: f64 },
    /// `y ~ Poisson(exp(u))`.
    Poisson,
    /// Overdispersed counts with mean `exp(u)`, variance `m + m^2 / shape`.
    NegativeBinomial { shape: f64 },
}

impl ResponseLaw {
    pub fn mean(&self, u: f64) -> f64 {
        match *self {
            ResponseLaw::GaussianNoise { .. }
            | ResponseLaw::StudentNoise { .. }
            | ResponseLaw::CauchyNoise { .. } => u,
            ResponseLaw::Bernoulli { flip } => flip + (1.0 - 2.0 * flip) * glm::sigmoid(u),
            ResponseLaw::Poisson | ResponseLaw::NegativeBinomial { .. } => u.exp(),
        }
    }

    /// Conditional variance; infinite for laws without a second moment.
    pub fn variance(&self, u: f64) -> f64 {
        match *self {
            ResponseLaw::GaussianNoise { sd } => sd * sd,
            ResponseLaw::StudentNoise { df, scale } => {
                if df > 2.0 {
                    scale * scale * df / (df - 2.0)
                } else {
                    f64::INFINITY
                }
            }
            ResponseLaw::CauchyNoise { .. } => f64::INFINITY,
            ResponseLaw::Bernoulli { .. } => {
                let m = self.mean(u);
                m * (1.0 - m)
            }
            ResponseLaw::Poisson => u.exp(),
            ResponseLaw::NegativeBinomial { shape } => {
                let m = u.exp();
                m + m * m / shape
            }
        }
    }

    pub fn has_finite_variance(&self) -> bool {
        self.variance(0.0).is_finite()
    }

    pub fn sample<R: Rng + ?Sized>(&self, u: f64, rng: &mut R) -> f64 {
        match *self {
            ResponseLaw::GaussianNoise { sd } => u + sd * rng.sample::<f64, _>(StandardNormal),
            ResponseLaw::StudentNoise { df, scale } => {
                u + scale * StudentT::new(df).expect("df > 0").sample(rng)
            }
            ResponseLaw::CauchyNoise { scale } => {
                u + Cauchy::new(0.0, scale).expect("scale > 0").sample(rng)
            }
            ResponseLaw::Bernoulli { .. } => {
                let m = self.mean(u);
                if rng.random::<f64>() < m {
                    1.0
                } else {
                    0.0
                }
            }
            ResponseLaw::Poisson => poisson_draw(u.exp(), rng),
            ResponseLaw::NegativeBinomial { shape } => {
                let m = u.exp();
                let rate = Gamma::new(shape, m / shape).expect("shape > 0").sample(rng);
                poisson_draw(rate, rng)
            }
        }
    }
}

fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng)
}

/// The data-generating process `IP`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueProcess {
    pub response: ResponseLaw,
    /// Index coefficients `beta` of the response law.
    pub coef: Vector,
    pub covariates: Covariates,
    /// Declares that the model family contains this process.
    pub matches_model: bool,
}

impl TrueProcess {
    pub fn dim(&self) -> usize {
        self.coef.len()
    }
}

/// An immutable dataset: design rows and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Arc<Matrix>,
    pub y: Vector,
    /// Stream that generated the data; `None` for external data.
    pub seed_record: Option<RngStream>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(BvmError::InvalidArgument(format!(
                "design has {} rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Self {
            x: Arc::new(x),
            y,
            seed_record: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Draw a dataset of size `n` from the true process. Regenerating with the
/// same stream reproduces the data bit for bit.
pub fn sample_dataset(truth: &TrueProcess, n: usize, stream: RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(BvmError::InvalidArgument("sample size must be positive".into()));
    }
    let mut rng = stream.rng();
    let x = match &truth.covariates {
        Covariates::Fixed(x) => {
            if x.nrows() != n {
                return Err(BvmError::InvalidArgument(format!(
                    "fixed design has {} rows, requested n = {n}",
                    x.nrows()
                )));
            }
            x.clone()
        }
        Covariates::Gaussian { p, scale } => {
            // row-major fill so a prefix of rows never depends on n
            let mut m = Matrix::zeros(n, *p);
            for i in 0..n {
                for j in 0..*p {
                    m[(i, j)] = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Arc::new(m)
        }
    };
    if x.ncols() != truth.coef.len() {
        return Err(BvmError::DimensionMismatch {
            expected: x.ncols(),
            got: truth.coef.len(),
        });
    }
    let index = &*x * &truth.coef;
    let y = Vector::from_iterator(n, index.iter().map(|&u| truth.response.sample(u, &mut rng)));
    Ok(Dataset {
        x,
        y,
        seed_record: Some(stream),
    })
}

/// Value of an expectation, with a standard error when it was estimated by
/// simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub value: f64,
    pub se: Option<f64>,
}

impl Expectation {
    pub fn exact(value: f64) -> Self {
        Self { value, se: None }
    }
}

/// A pluggable quasi log-likelihood.
///
/// The `eval_*` methods are unchecked; use the free functions of this module
/// ([`log_lik`], [`score`], ...) which validate the input first.
pub trait QuasiModel: Send + Sync {
    fn dim(&self) -> usize;
    fn family(&self) -> Family;
    fn domain(&self) -> &DomainBox;

    fn eval_log_lik(&self, data: &Dataset, theta: &Vector) -> f64;
    fn eval_score(&self, data: &Dataset, theta: &Vector) -> Vector;
    fn eval_hessian(&self, data: &Dataset, theta: &Vector) -> Matrix;

    /// `E L(theta)` for a sample of size `n`.
    fn eval_expected_loglik(&self, _truth: &TrueProcess, _n: usize, _theta: &Vector) -> Result<Expectation> {
        Err(BvmError::Unsupported(
            "model has no analytic expectation and no Monte Carlo budget".into(),
        ))
    }

    /// `E L(theta) - E L(theta_ref)`; families override this to avoid
    /// cancellation between two large expectations.
    fn eval_expected_loglik_ratio(
        &self,
        truth: &TrueProcess,
        n: usize,
        theta: &Vector,
        theta_ref: &Vector,
    ) -> Result<f64> {
        Ok(self.eval_expected_loglik(truth, n, theta)?.value - self.eval_expected_loglik(truth, n, theta_ref)?.value)
    }

    fn eval_expected_score(&self, _truth: &TrueProcess, _n: usize, _theta: &Vector) -> Result<Vector> {
        Err(BvmError::Unsupported("expected score".into()))
    }

    fn eval_expected_hessian(&self, _truth: &TrueProcess, _n: usize, _theta: &Vector) -> Result<Matrix> {
        Err(BvmError::Unsupported("expected hessian".into()))
    }

    /// `Var(grad L(theta))` under the true process.
    fn eval_score_covariance(&self, _truth: &TrueProcess, _n: usize, _theta: &Vector) -> Result<Matrix> {
        Err(BvmError::Unsupported("score covariance".into()))
    }

    /// Total Fisher information `D^2(theta) = -grad^2 E_theta L(theta)`
    /// computed under the parametric measure at `theta`.
    fn eval_parametric_fisher(&self, _truth: &TrueProcess, _n: usize, _theta: &Vector) -> Result<Matrix> {
        Err(BvmError::Unsupported("parametric Fisher information".into()))
    }

    /// `Some(sigma)` when the model is the Gaussian linear family, whose
    /// posterior under flat or Gaussian priors is available in closed form.
    fn conjugate_noise_sd(&self) -> Option<f64> {
        None
    }
}

fn check_theta(model: &dyn QuasiModel, theta: &Vector) -> Result<()> {
    model.domain().check(theta)
}

fn check_data(model: &dyn QuasiModel, data: &Dataset) -> Result<()> {
    if data.dim() != model.dim() {
        return Err(BvmError::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    Ok(())
}

pub fn log_lik(model: &dyn QuasiModel, data: &Dataset, theta: &Vector) -> Result<f64> {
    check_theta(model, theta)?;
    check_data(model, data)?;
    Ok(model.eval_log_lik(data, theta))
}

/// `L(theta) - L(theta_ref)`.
pub fn log_lik_ratio(model: &dyn QuasiModel, data: &Dataset, theta: &Vector, theta_ref: &Vector) -> Result<f64> {
    Ok(log_lik(model, data, theta)? - log_lik(model, data, theta_ref)?)
}

pub fn score(model: &dyn QuasiModel, data: &Dataset, theta: &Vector) -> Result<Vector> {
    check_theta(model, theta)?;
    check_data(model, data)?;
    Ok(model.eval_score(data, theta))
}

pub fn observed_hessian(model: &dyn QuasiModel, data: &Dataset, theta: &Vector) -> Result<Matrix> {
    check_theta(model, theta)?;
    check_data(model, data)?;
    let h = model.eval_hessian(data, theta);
    Ok((&h + h.transpose()) * 0.5)
}

pub fn expected_loglik(model: &dyn QuasiModel, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Expectation> {
    check_theta(model, theta)?;
    model.eval_expected_loglik(truth, n, theta)
}

/// `E L(theta, theta_ref) = E L(theta) - E L(theta_ref)`.
pub fn expected_loglik_ratio(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    n: usize,
    theta: &Vector,
    theta_ref: &Vector,
) -> Result<f64> {
    check_theta(model, theta)?;
    check_theta(model, theta_ref)?;
    model.eval_expected_loglik_ratio(truth, n, theta, theta_ref)
}

pub fn expected_score(model: &dyn QuasiModel, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Vector> {
    check_theta(model, theta)?;
    model.eval_expected_score(truth, n, theta)
}

pub fn expected_hessian(model: &dyn QuasiModel, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Matrix> {
    check_theta(model, theta)?;
    let h = model.eval_expected_hessian(truth, n, theta)?;
    Ok((&h + h.transpose()) * 0.5)
}

/// Gradient of the stochastic component `zeta(theta) = L(theta) - E L(theta)`.
pub fn stochastic_score(model: &dyn QuasiModel, data: &Dataset, truth: &TrueProcess, theta: &Vector) -> Result<Vector> {
    Ok(score(model, data, theta)? - expected_score(model, truth, data.n(), theta)?)
}

/// Central-difference step `h = max(1, |theta_j|) * eps^(1/3)`.
pub fn fd_step(theta_j: f64) -> f64 {
    theta_j.abs().max(1.0) * f64::EPSILON.cbrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_rejects_with_index() {
        let d = DomainBox::symmetric(3, 50.0);
        let err = d.check(&Vector::from_vec(vec![0.0, 51.0, 0.0])).unwrap_err();
        assert!(matches!(err, BvmError::DomainViolation { index: 1, .. }));
        assert!(d.check(&Vector::from_vec(vec![f64::NAN, 0.0, 0.0])).is_err());
    }

    #[test]
    fn dataset_regeneration_is_bit_identical() {
        let truth = TrueProcess {
            response: ResponseLaw::Bernoulli { flip: 0.0 },
            coef: Vector::from_vec(vec![0.5, -0.5]),
            covariates: Covariates::Gaussian { p: 2, scale: 1.0 },
            matches_model: true,
        };
        let a = sample_dataset(&truth, 50, RngStream::new(11, 0)).unwrap();
        let b = sample_dataset(&truth, 50, RngStream::new(11, 0)).unwrap();
        let c = sample_dataset(&truth, 50, RngStream::new(11, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, c.y);
        assert_eq!(a.seed_record, Some(RngStream::new(11, 0)));
    }

    #[test]
    fn gaussian_mean_sample_mean_is_clt_consistent() {
        let n = 100_000;
        let truth = TrueProcess {
            response: ResponseLaw::GaussianNoise { sd: 1.0 },
            coef: Vector::from_vec(vec![0.0]),
            covariates: Covariates::intercept(n),
            matches_model: true,
        };
        let d = sample_dataset(&truth, n, RngStream::new(3, 0)).unwrap();
        assert!(d.y.mean().abs() <= 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn fixed_design_row_mismatch_is_rejected() {
        let truth = TrueProcess {
            response: ResponseLaw::GaussianNoise { sd: 1.0 },
            coef: Vector::from_vec(vec![0.0]),
            covariates: Covariates::intercept(10),
            matches_model: true,
        };
        assert!(sample_dataset(&truth, 11, RngStream::new(0, 0)).is_err());
        assert!(sample_dataset(&truth, 0, RngStream::new(0, 0)).is_err());
    }
}
