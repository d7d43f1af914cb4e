//! Simulation-based expectations for models without closed forms.

use crate::error::{BvmError, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::RngStream;

use super::{sample_dataset, Dataset, DomainBox, Expectation, Family, QuasiModel, TrueProcess};

pub const DEFAULT_MC_REPLICATIONS: usize = 100_000;

/// Wraps a model and answers expectation queries by averaging over
/// `replications` datasets drawn from the true process. The same replication
/// streams are reused for every `theta`, so the expected criterion is a smooth
/// deterministic function that optimizers can work with.
#[derive(Debug, Clone)]
pub struct MonteCarloExpectations<M> {
    inner: M,
    replications: usize,
    stream: RngStream,
}

impl<M: QuasiModel> MonteCarloExpectations<M> {
    pub fn new(inner: M, replications: usize, stream: RngStream) -> Self {
        Self {
            inner,
            replications,
            stream,
        }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn datasets(&self, truth: &TrueProcess, n: usize) -> Result<Vec<Dataset>> {
        if self.replications < 2 {
            return Err(BvmError::Unsupported(
                "Monte Carlo expectations need a replication budget of at least 2".into(),
            ));
        }
        (0..self.replications)
            .map(|r| sample_dataset(truth, n, self.stream.substream(r as u64)))
            .collect()
    }
}

impl<M: QuasiModel> QuasiModel for MonteCarloExpectations<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn family(&self) -> Family {
        self.inner.family()
    }

    fn domain(&self) -> &DomainBox {
        self.inner.domain()
    }

    fn eval_log_lik(&self, data: &Dataset, theta: &Vector) -> f64 {
        self.inner.eval_log_lik(data, theta)
    }

    fn eval_score(&self, data: &Dataset, theta: &Vector) -> Vector {
        self.inner.eval_score(data, theta)
    }

    fn eval_hessian(&self, data: &Dataset, theta: &Vector) -> Matrix {
        self.inner.eval_hessian(data, theta)
    }

    fn eval_expected_loglik(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Expectation> {
        let values: Vec<f64> = self
            .datasets(truth, n)?
            .iter()
            .map(|d| self.inner.eval_log_lik(d, theta))
            .collect();
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        Ok(Expectation {
            value: mean,
            se: Some((var / r).sqrt()),
        })
    }

    fn eval_expected_score(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Vector> {
        let data = self.datasets(truth, n)?;
        let mut acc = Vector::zeros(self.dim());
        for d in &data {
            acc += self.inner.eval_score(d, theta);
        }
        Ok(acc / data.len() as f64)
    }

    fn eval_expected_hessian(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Matrix> {
        let data = self.datasets(truth, n)?;
        let p = self.dim();
        let mut acc = Matrix::zeros(p, p);
        for d in &data {
            acc += self.inner.eval_hessian(d, theta);
        }
        Ok(acc / data.len() as f64)
    }

    fn eval_score_covariance(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Matrix> {
        let scores: Vec<Vector> = self
            .datasets(truth, n)?
            .iter()
            .map(|d| self.inner.eval_score(d, theta))
            .collect();
        let r = scores.len() as f64;
        let p = self.dim();
        let mean = scores.iter().fold(Vector::zeros(p), |a, s| a + s) / r;
        let mut cov = Matrix::zeros(p, p);
        for s in &scores {
            let c = s - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        Ok(cov / (r - 1.0))
    }

    fn eval_parametric_fisher(&self, truth: &TrueProcess, n: usize, theta: &Vector) -> Result<Matrix> {
        self.inner.eval_parametric_fisher(truth, n, theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Covariates, GlmModel, ResponseLaw};

    #[test]
    fn agrees_with_analytic_gaussian_mean() {
        let n = 10;
        let truth = TrueProcess {
            response: ResponseLaw::GaussianNoise { sd: 2.0 },
            coef: Vector::from_vec(vec![1.0]),
            covariates: Covariates::intercept(n),
            matches_model: false,
        };
        let exact = GlmModel::gaussian_linear(1, 1.0).unwrap();
        let mc = MonteCarloExpectations::new(exact.clone(), 20_000, RngStream::new(9, 0));
        let theta = Vector::from_vec(vec![0.5]);
        let e = mc.eval_expected_loglik(&truth, n, &theta).unwrap();
        let a = exact.eval_expected_loglik(&truth, n, &theta).unwrap();
        assert!((e.value - a.value).abs() <= 4.0 * e.se.unwrap());
        let v = mc.eval_score_covariance(&truth, n, &theta).unwrap();
        assert!((v[(0, 0)] - 40.0).abs() < 2.0);
    }

    #[test]
    fn zero_budget_is_unsupported() {
        let truth = TrueProcess {
            response: ResponseLaw::GaussianNoise { sd: 1.0 },
            coef: Vector::from_vec(vec![0.0]),
            covariates: Covariates::intercept(3),
            matches_model: true,
        };
        let mc = MonteCarloExpectations::new(GlmModel::gaussian_linear(1, 1.0).unwrap(), 0, RngStream::new(0, 0));
        assert!(matches!(
            mc.eval_expected_loglik(&truth, 3, &Vector::zeros(1)),
            Err(BvmError::Unsupported(_))
        ));
    }
}
