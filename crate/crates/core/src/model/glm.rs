//! Canonical-link regression families: Gaussian linear, logistic, Poisson.
//!
//! Each observation contributes `kappa * (y v - b(v)) + c(y)` with linear
//! index `v = x^T theta`. Expectations under a [`TrueProcess`] are exact sums
//! over a fixed design, or Gauss-Hermite quadrature in the plane of
//! `(beta, theta)` for Gaussian covariates.

use std::f64::consts::PI;

use crate::error::{BvmError, Result};
use crate::linalg::{Matrix, Vector};
use crate::quadrature::{index_moments, IndexMoments};

use super::{Covariates, Dataset, DomainBox, Expectation, Family, QuasiModel, ResponseLaw, TrueProcess};

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Link {
    Identity { sigma: f64 },
    Logit,
    Log,
}

impl Link {
    fn kappa(self) -> f64 {
        match self {
            Link::Identity { sigma } => 1.0 / (sigma * sigma),
            _ => 1.0,
        }
    }

    fn cumulant(self, v: f64) -> f64 {
        match self {
            Link::Identity { .. } => 0.5 * v * v,
            Link::Logit => softplus(v),
            Link::Log => v.exp(),
        }
    }

    /// `b(v) - b(w)` without cancellation for the quadratic cumulant.
    fn cumulant_gap(self, v: f64, w: f64) -> f64 {
        match self {
            Link::Identity { .. } => 0.5 * (v - w) * (v + w),
            _ => self.cumulant(v) - self.cumulant(w),
        }
    }

    fn mean(self, v: f64) -> f64 {
        match self {
            Link::Identity { .. } => v,
            Link::Logit => sigmoid(v),
            Link::Log => v.exp(),
        }
    }

    fn mean_slope(self, v: f64) -> f64 {
        match self {
            Link::Identity { .. } => 1.0,
            Link::Logit => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            Link::Log => v.exp(),
        }
    }

    /// Per-observation term of `L` that does not involve `theta`.
    fn base_measure(self, y: f64) -> f64 {
        match self {
            Link::Identity { sigma } => -0.5 * y * y / (sigma * sigma) - 0.5 * (2.0 * PI * sigma * sigma).ln(),
            _ => 0.0,
        }
    }
}

/// Built-in regression quasi-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmModel {
    p: usize,
    link: Link,
    domain: DomainBox,
}

impl GlmModel {
    /// Gaussian linear regression with working noise scale `sigma`.
    pub fn gaussian_linear(p: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(BvmError::InvalidArgument(format!("noise scale must be positive, got {sigma}")));
        }
        Self::build(p, Link::Identity { sigma })
    }

    pub fn logistic(p: usize) -> Result<Self> {
        Self::build(p, Link::Logit)
    }

    pub fn poisson(p: usize) -> Result<Self> {
        Self::build(p, Link::Log)
    }

    fn build(p: usize, link: Link) -> Result<Self> {
        if p == 0 {
            return Err(BvmError::InvalidArgument("dimension must be positive".into()));
        }
        Ok(Self {
            p,
            link,
            domain: DomainBox::symmetric(p, DomainBox::DEFAULT_HALF_WIDTH),
        })
    }

    pub fn with_domain(mut self, domain: DomainBox) -> Result<Self> {
        if domain.dim() != self.p {
            return Err(BvmError::DimensionMismatch {
                expected: self.p,
                got: domain.dim(),
            });
        }
        self.domain = domain;
        Ok(self)
    }

    /// The response law under which this model is correctly specified.
    pub fn native_response(&self) -> ResponseLaw {
        match self.link {
            Link::Identity { sigma } => ResponseLaw::GaussianNoise { sd: sigma },
            Link::Logit => ResponseLaw::Bernoulli { flip: 0.0 },
            Link::Log => ResponseLaw::Poisson,
        }
    }

    fn check_truth(&self, truth: &TrueProcess, n: usize) -> Result<()> {
        if truth.dim() != self.p || truth.covariates.dim() != self.p {
            return Err(BvmError::DimensionMismatch {
                expected: self.p,
                got: truth.covariates.dim(),
            });
        }
        if let Covariates::Fixed(x) = &truth.covariates {
            if x.nrows() != n {
                return Err(BvmError::InvalidArgument(format!(
                    "fixed design has {} rows, requested n = {n}",
                    x.nrows()
                )));
            }
        }
        if n == 0 {
            return Err(BvmError::InvalidArgument("sample size must be positive".into()));
        }
        Ok(())
    }

    fn require_finite_variance(truth: &TrueProcess) -> Result<()> {
        if truth.response.has_finite_variance() {
            Ok(())
        } else {
            Err(BvmError::NonFinite(format!(
                "response law {:?} has no finite variance",
                truth.response
            )))
        }
    }

    /// Sums (fixed design) or `n` times expectations (Gaussian covariates) of
    /// `f(u, v)`, `f x`, `f x x^T` with `u = x^T beta`, `v = x^T theta`.
    fn moments(
        &self,
        truth: &TrueProcess,
        n: usize,
        theta: &Vector,
        with_second: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> IndexMoments {
        match &truth.covariates {
            Covariates::Fixed(x) => {
                let u = &**x * &truth.coef;
                let v = &**x * theta;
                let mut e0 = 0.0;
                let mut e1 = Vector::zeros(self.p);
                let mut e2 = if with_second {
                    Matrix::zeros(self.p, self.p)
                } else {
                    Matrix::zeros(0, 0)
                };
                for i in 0..x.nrows() {
                    let w = f(u[i], v[i]);
                    e0 += w;
                    let row = x.row(i).transpose();
                    e1.axpy(w, &row, 1.0);
                    if with_second {
                        e2.ger(w, &row, &row, 1.0);
                    }
                }
                IndexMoments { e0, e1, e2 }
            }
            Covariates::Gaussian { scale, .. } => {
                let mut m = index_moments(&truth.coef, theta, *scale, with_second, f);
                let nf = n as f64;
                m.e0 *= nf;
                m.e1 *= nf;
                if with_second {
                    m.e2 *= nf;
                }
                m
            }
        }
    }
}

impl QuasiModel for GlmModel {
    fn dim(&self) -> usize {
        self.p
    }

    fn family(&self) -> Family {
        match self.link {
            Link::Identity { .. } => Family::GaussianLinear,
            Link::Logit => Family::Logistic,
            Link::Log => Family::Poisson,
        }
    }

    fn domain(&self) -> &DomainBox {
        &self.domain
    }

    fn eval_log_lik(&self, data: &Dataset, theta: &Vector) -> f64 {
        let link = self.link;
        let kappa = link.kappa();
        let v = &*data.x * theta;
        v.iter()
            .zip(data.y.iter())
            .map(|(&v, &y)| kappa * (y * v - link.cumulant(v)) + link.base_measure(y))
            .sum()
    }

    fn eval_score(&self, data: &Dataset, theta: &Vector) -> Vector {
        let link = self.link;
        let kappa = link.kappa();
        let v = &*data.x * theta;
        let resid = Vector::from_iterator(
            v.len(),
            v.iter().zip(data.y.iter()).map(|(&v, &y)| kappa * (y - link.mean(v))),
        );
        data.x.tr_mul(&resid)
    }

    fn eval_hessian(&self, data: &Dataset, theta: &Vector) -> Matrix {
        let link = self.link;
        let kappa = link.kappa();
        let v = &*data.x * theta;
        let mut weighted = (*data.x).clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= kappa * link.mean_slope(v[i]);
        }
        let h = -(data.x.tr_mul(&weighted));
        (&h + h.transpose()) * 0.5
    }

    fn eval_expected_loglik(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Expectation> {
        self.check_truth(truth, n)?;
        let link = self.link;
        let kappa = link.kappa();
        let law = truth.response;
        let base = match link {
            Link::Identity { sigma } => {
                Self::require_finite_variance(truth)?;
                Some(sigma)
            }
            _ => None,
        };
        let m = self.moments(truth, n, theta, false, |u, v| {
            let mu = law.mean(u);
            let mut val = kappa * (mu * v - link.cumulant(v));
            if let Some(sigma) = base {
                let second = mu * mu + law.variance(u);
                val += -0.5 * second / (sigma * sigma) - 0.5 * (2.0 * PI * sigma * sigma).ln();
            }
            val
        });
        Ok(Expectation::exact(m.e0))
    }

    fn eval_expected_loglik_ratio(
        &self,
        truth: &TrueProcess,
        n: usize,
        theta: &Vector,
        theta_ref: &Vector,
    ) -> Result<f64> {
        self.check_truth(truth, n)?;
        let link = self.link;
        let kappa = link.kappa();
        let law = truth.response;
        let val = match &truth.covariates {
            Covariates::Fixed(x) => {
                let u = &**x * &truth.coef;
                let v = &**x * theta;
                let w = &**x * theta_ref;
                (0..x.nrows())
                    .map(|i| kappa * (law.mean(u[i]) * (v[i] - w[i]) - link.cumulant_gap(v[i], w[i])))
                    .sum::<f64>()
            }
            Covariates::Gaussian { .. } => {
                self.eval_expected_loglik(truth, n, theta)?.value - self.eval_expected_loglik(truth, n, theta_ref)?.value
            }
        };
        Ok(val)
    }

    fn eval_expected_score(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Vector> {
        self.check_truth(truth, n)?;
        let link = self.link;
        let kappa = link.kappa();
        let law = truth.response;
        Ok(self
            .moments(truth, n, theta, false, |u, v| kappa * (law.mean(u) - link.mean(v)))
            .e1)
    }

    fn eval_expected_hessian(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Matrix> {
        self.check_truth(truth, n)?;
        let link = self.link;
        let kappa = link.kappa();
        Ok(-self.moments(truth, n, theta, true, |_, v| kappa * link.mean_slope(v)).e2)
    }

    fn eval_score_covariance(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Matrix> {
        self.check_truth(truth, n)?;
        Self::require_finite_variance(truth)?;
        let link = self.link;
        let k2 = link.kappa().powi(2);
        let law = truth.response;
        let cov = match &truth.covariates {
            // the design is not random: only the response noise contributes
            Covariates::Fixed(_) => self.moments(truth, n, theta, true, |u, _| k2 * law.variance(u)).e2,
            Covariates::Gaussian { .. } => {
                let second = self.moments(truth, n, theta, true, |u, v| {
                    let bias = law.mean(u) - link.mean(v);
                    k2 * (law.variance(u) + bias * bias)
                });
                let first = self.moments(truth, n, theta, false, |u, v| law.mean(u) - link.mean(v));
                let mean = first.e1 * (link.kappa() / n as f64);
                second.e2 - mean.clone() * mean.transpose() * n as f64
            }
        };
        Ok((&cov + cov.transpose()) * 0.5)
    }

    fn eval_parametric_fisher(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Matrix> {
        // the curvature of E_theta L depends on the covariate law only
        Ok(-self.eval_expected_hessian(truth, n, theta)?)
    }

    fn conjugate_noise_sd(&self) -> Option<f64> {
        match self.link {
            Link::Identity { sigma } => Some(sigma),
            _ => None,
        }
    }
}
