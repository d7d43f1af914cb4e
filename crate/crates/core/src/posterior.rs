//! Posterior computation: closed form for the conjugate Gaussian linear
//! model, preconditioned random-walk Metropolis otherwise, and the posterior
//! summaries the discrepancy metrics consume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BvmError, Result};
use crate::geometry::{LocalGeometry, ScoreState};
use crate::linalg::{project_psd, spd_inverse, spd_sqrt, symmetrize, Matrix, Vector};
use crate::model::{self, Dataset, QuasiModel};
use crate::prior::Prior;
use crate::rng::RngStream;
use crate::special::{noncentral_chi2_cdf, norm_cdf};

/// Draws used when a Gaussian posterior quantity has no closed form.
pub const ORACLE_DRAWS: usize = 200_000;
/// Below this effective sample size every downstream metric is flagged.
pub const LOW_ESS: f64 = 100.0;
pub const MIN_BURN_IN: usize = 5000;
const ACCEPTANCE_RANGE: (f64, f64) = (0.05, 0.7);
const MGF_BATCHES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Retained draws over all chains.
    pub draws: usize,
    /// Defaults to 20% of `draws`, at least 5000.
    pub burn_in: Option<usize>,
    pub chains: usize,
    pub target_acceptance: f64,
    pub initial_scale: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            draws: 100_000,
            burn_in: None,
            chains: 1,
            target_acceptance: 0.234,
            initial_scale: 2.38,
        }
    }
}

impl ChainConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or((self.draws / 5).max(MIN_BURN_IN))
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 || self.chains == 0 {
            return Err(invalid("chain needs at least one draw and one chain"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) || !(self.initial_scale > 0.0) {
            return Err(invalid("target acceptance must lie in (0, 1) and the initial scale be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    /// Post burn-in acceptance rate of each chain.
    pub acceptance_rate: Vec<f64>,
    /// Frozen step scale of each chain.
    pub step_scale: Vec<f64>,
    pub burn_in: usize,
    pub seed: RngStream,
    /// Every chain accepted within `[0.05, 0.7]` after adaptation.
    pub acceptance_ok: bool,
}

/// Retained draws, row-major `draws x p`, chains concatenated in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub p: usize,
    pub chains: usize,
    pub values: Vec<f64>,
    pub log_weights: Option<Vec<f64>>,
    pub meta: ChainMeta,
}

impl PosteriorSample {
    pub fn len(&self) -> usize {
        self.values.len() / self.p
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn draw(&self, i: usize) -> Vector {
        Vector::from_column_slice(&self.values[i * self.p..(i + 1) * self.p])
    }

    pub fn per_chain(&self) -> usize {
        self.len() / self.chains
    }
}

/// A Gaussian posterior `N(mean, cov)` known in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vector,
    pub cov: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Posterior {
    Exact(GaussianPosterior),
    Sample(PosteriorSample),
}

impl Posterior {
    pub fn is_exact(&self) -> bool {
        matches!(self, Posterior::Exact(_))
    }

    pub fn dim(&self) -> usize {
        match self {
            Posterior::Exact(g) => g.mean.len(),
            Posterior::Sample(s) => s.p,
        }
    }
}

fn log_target(model: &dyn QuasiModel, data: &Dataset, prior: &Prior, theta: &Vector) -> f64 {
    if !model.domain().contains(theta) {
        return f64::NEG_INFINITY;
    }
    model.eval_log_lik(data, theta) + prior.log_density(theta)
}

/// Closed-form posterior of the Gaussian linear model under a flat or
/// Gaussian prior. The precision is the data Hessian `X^T X / sigma^2` plus
/// the prior precision; it equals `D0^2 + G^2` for a fixed design.
pub fn exact_gaussian_posterior(
    model: &dyn QuasiModel,
    data: &Dataset,
    prior: &Prior,
    geom: &LocalGeometry,
) -> Result<GaussianPosterior> {
    if model.conjugate_noise_sd().is_none() {
        return Err(BvmError::Unsupported("closed-form posterior needs the Gaussian linear model".into()));
    }
    let p = model.dim();
    let g_sq = prior
        .precision(p)
        .ok_or_else(|| BvmError::Unsupported("closed-form posterior needs a flat or Gaussian prior".into()))?;
    let anchor = &geom.theta_star;
    let hess = -model::observed_hessian(model, data, anchor)?;
    let grad = model::score(model, data, anchor)?;
    let precision = symmetrize(&(hess + &g_sq));
    let cov = spd_inverse(&precision, "posterior precision")?;
    let mean = anchor + &cov * (grad - &g_sq * anchor);
    Ok(GaussianPosterior { mean, cov })
}

/// Random-walk Metropolis with proposal covariance `(s^2 / p) D0^-2`. The
/// step scale adapts on the log scale toward the target acceptance during
/// burn-in and is frozen afterwards.
pub fn rwm_sample(
    model: &dyn QuasiModel,
    data: &Dataset,
    prior: &Prior,
    geom: &LocalGeometry,
    init: &Vector,
    config: &ChainConfig,
    stream: RngStream,
) -> Result<PosteriorSample> {
    config.validate()?;
    let p = model.dim();
    if data.dim() != p || init.len() != p {
        return Err(BvmError::DimensionMismatch {
            expected: p,
            got: if data.dim() != p { data.dim() } else { init.len() },
        });
    }
    let start_value = log_target(model, data, prior, init);
    if !start_value.is_finite() {
        return Err(invalid("posterior log-density is not finite at the initial point"));
    }
    let burn_in = config.burn_in();
    let per_chain = config.draws.div_ceil(config.chains);
    let runs: Vec<(Vec<f64>, f64, f64)> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.substream(c as u64).rng();
            let mut theta = init.clone();
            let mut current = start_value;
            let mut log_scale = config.initial_scale.ln();
            let mut out = Vec::with_capacity(per_chain * p);
            let mut accepted = 0usize;
            let pf = (p as f64).sqrt();
            for t in 0..burn_in + per_chain {
                let z = Vector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let proposal = &theta + &geom.d0_inv * z * (log_scale.exp() / pf);
                let value = log_target(model, data, prior, &proposal);
                let log_ratio = value - current;
                let u: f64 = rng.random();
                let accept = log_ratio >= 0.0 || u.ln() < log_ratio;
                if accept {
                    theta = proposal;
                    current = value;
                }
                if t < burn_in {
                    let prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
                    log_scale += (prob - config.target_acceptance) / ((t + 1) as f64).powf(0.6);
                } else {
                    accepted += accept as usize;
                    out.extend(theta.iter());
                }
            }
            (out, accepted as f64 / per_chain as f64, log_scale.exp())
        })
        .collect();
    let mut values = Vec::with_capacity(per_chain * p * config.chains);
    let mut acceptance_rate = Vec::new();
    let mut step_scale = Vec::new();
    for (v, a, s) in runs {
        values.extend(v);
        acceptance_rate.push(a);
        step_scale.push(s);
    }
    let acceptance_ok = acceptance_rate
        .iter()
        .all(|&a| a >= ACCEPTANCE_RANGE.0 && a <= ACCEPTANCE_RANGE.1);
    Ok(PosteriorSample {
        p,
        chains: config.chains,
        values,
        log_weights: None,
        meta: ChainMeta {
            acceptance_rate,
            step_scale,
            burn_in,
            seed: stream,
            acceptance_ok,
        },
    })
}

/// How the posterior is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PosteriorMode {
    /// Closed form; Gaussian linear model with a flat or Gaussian prior.
    Exact,
    Sampler(ChainConfig),
}

/// Posterior for one dataset. The chain starts at the qMLE, or at `theta*`
/// when the optimizer fails.
pub fn compute_posterior(
    model: &dyn QuasiModel,
    data: &Dataset,
    prior: &Prior,
    geom: &LocalGeometry,
    mode: &PosteriorMode,
    stream: RngStream,
) -> Result<Posterior> {
    match mode {
        PosteriorMode::Exact => Ok(Posterior::Exact(exact_gaussian_posterior(model, data, prior, geom)?)),
        PosteriorMode::Sampler(cfg) => {
            let mle = crate::geometry::solve_mle(model, data, &geom.theta_star, &Default::default())?;
            let init = if mle.converged { mle.theta_hat } else { geom.theta_star.clone() };
            Ok(Posterior::Sample(rwm_sample(model, data, prior, geom, &init, cfg, stream)?))
        }
    }
}

/// Flags rays from `center` along which `L + log prior` does not fall below
/// its value at `center` before the domain ends.
pub fn propriety_suspect(model: &dyn QuasiModel, data: &Dataset, prior: &Prior, geom: &LocalGeometry, center: &Vector) -> bool {
    let base = log_target(model, data, prior, center);
    for j in 0..geom.p {
        for s in [1.0, -1.0] {
            let dir = geom.d0_inv.column(j) * s;
            let mut last = None;
            let mut t = geom.r0;
            loop {
                let theta = center + &dir * t;
                if !model.domain().contains(&theta) {
                    break;
                }
                last = Some(log_target(model, data, prior, &theta));
                t *= 2.0;
            }
            if last.is_some_and(|v| v > base - 1.0) {
                return true;
            }
        }
    }
    false
}

/// Effective sample size of one series by the initial positive sequence
/// rule: autocorrelation pairs are summed until a pair sum turns negative.
pub fn ess_initial_positive(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |k: usize| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = acf(k) + acf(k + 1);
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    n as f64 / tau.max(1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: Vector,
    pub cov: Matrix,
    pub restricted_mean: Vector,
    pub restricted_cov: Matrix,
    /// Posterior mass of `Theta0(r0)`.
    pub inside_mass: f64,
    /// `(1 - inside_mass) / inside_mass`.
    #[serde(with = "crate::serde_util::nonfinite")]
    pub tail_mass: f64,
    /// Minimum over coordinates; infinite for a closed-form posterior.
    #[serde(with = "crate::serde_util::nonfinite")]
    pub ess: f64,
    #[serde(with = "crate::serde_util::nonfinite_vec")]
    pub ess_per_coord: Vec<f64>,
    /// Monte Carlo standard error of each mean coordinate.
    pub mean_se: Vec<f64>,
    pub exact: bool,
    pub low_precision: bool,
}

fn restricted_exact(post: &GaussianPosterior, geom: &LocalGeometry, stream: RngStream) -> Result<(Vector, Matrix, f64)> {
    let p = geom.p as f64;
    let r_sq = geom.r0 * geom.r0;
    // standardized coordinates w = D0 (theta - theta*) ~ N(mu, S)
    let mu = &geom.d0 * (&post.mean - &geom.theta_star);
    let s = symmetrize(&(&geom.d0 * &post.cov * &geom.d0));
    let identity = Matrix::identity(geom.p, geom.p);
    let (w_mean, w_second, mass) = if (&s - &identity).amax() <= 1e-12 {
        // E[w 1(|w| <= r)] = mu F_{p+2}, E[w w^T 1(|w| <= r)] = I F_{p+2} + mu mu^T F_{p+4}
        let nc = mu.norm_squared();
        let f0 = noncentral_chi2_cdf(p, nc, r_sq);
        let f2 = noncentral_chi2_cdf(p + 2.0, nc, r_sq);
        let f4 = noncentral_chi2_cdf(p + 4.0, nc, r_sq);
        (&mu * f2, identity * f2 + &mu * mu.transpose() * f4, f0)
    } else {
        let root = spd_sqrt(&s, "standardized posterior covariance")?;
        let mut rng = stream.rng();
        let (mut m1, mut m2, mut count) = (Vector::zeros(geom.p), Matrix::zeros(geom.p, geom.p), 0usize);
        for _ in 0..ORACLE_DRAWS {
            let z = Vector::from_iterator(geom.p, (0..geom.p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let w = &mu + &root * z;
            if w.norm_squared() <= r_sq {
                m2 += &w * w.transpose();
                m1 += w;
                count += 1;
            }
        }
        let d = ORACLE_DRAWS as f64;
        (m1 / d, m2 / d, count as f64 / d)
    };
    if mass <= 0.0 {
        let nan = Vector::from_element(geom.p, f64::NAN);
        return Ok((nan.clone(), &nan * nan.transpose(), 0.0));
    }
    let cm = &w_mean / mass;
    let ccov = symmetrize(&(&w_second / mass - &cm * cm.transpose()));
    let mean = &geom.theta_star + &geom.d0_inv * &cm;
    let cov = symmetrize(&(&geom.d0_inv * ccov * &geom.d0_inv));
    Ok((mean, cov, mass))
}

fn weighted_moments<'a>(rows: impl Iterator<Item = &'a [f64]>, p: usize) -> (Vector, Matrix, usize) {
    let mut count = 0usize;
    let mut mean = Vector::zeros(p);
    let mut m2 = Matrix::zeros(p, p);
    // Welford update keeps the covariance accurate far from the origin
    for row in rows {
        count += 1;
        let x = Vector::from_column_slice(row);
        let d = &x - &mean;
        mean += &d / count as f64;
        let d2 = &x - &mean;
        m2 += &d * d2.transpose();
    }
    let cov = if count > 1 { symmetrize(&(m2 / (count - 1) as f64)) } else { Matrix::zeros(p, p) };
    (mean, cov, count)
}

/// Posterior mean, covariance, restricted moments over `Theta0(r0)`, tail
/// mass and effective sample size.
pub fn posterior_moments(post: &Posterior, geom: &LocalGeometry, stream: RngStream) -> Result<PosteriorSummary> {
    match post {
        Posterior::Exact(g) => {
            let (restricted_mean, restricted_cov, inside_mass) = restricted_exact(g, geom, stream)?;
            Ok(PosteriorSummary {
                mean: g.mean.clone(),
                cov: g.cov.clone(),
                restricted_mean,
                restricted_cov,
                inside_mass,
                tail_mass: (1.0 - inside_mass) / inside_mass,
                ess: f64::INFINITY,
                ess_per_coord: vec![f64::INFINITY; geom.p],
                mean_se: vec![0.0; geom.p],
                exact: true,
                low_precision: false,
            })
        }
        Posterior::Sample(s) => {
            if s.is_empty() {
                return Err(invalid("posterior sample is empty"));
            }
            let p = s.p;
            let (mean, cov, _) = weighted_moments(s.values.chunks(p), p);
            let inside: Vec<bool> = s.values.chunks(p).map(|r| geom.local_radius(&Vector::from_column_slice(r)) <= geom.r0).collect();
            let (restricted_mean, restricted_cov, k) =
                weighted_moments(s.values.chunks(p).zip(&inside).filter(|(_, &i)| i).map(|(r, _)| r), p);
            let inside_mass = k as f64 / s.len() as f64;
            let per = s.per_chain();
            let ess_per_coord: Vec<f64> = (0..p)
                .map(|j| {
                    (0..s.chains)
                        .map(|c| {
                            let series: Vec<f64> = (c * per..(c + 1) * per).map(|i| s.values[i * p + j]).collect();
                            ess_initial_positive(&series)
                        })
                        .sum()
                })
                .collect();
            let ess = ess_per_coord.iter().copied().fold(f64::INFINITY, f64::min);
            let mean_se = (0..p).map(|j| (cov[(j, j)] / ess_per_coord[j]).sqrt()).collect();
            let (restricted_mean, restricted_cov) = if k == 0 {
                (Vector::from_element(p, f64::NAN), Matrix::from_element(p, p, f64::NAN))
            } else {
                (restricted_mean, restricted_cov)
            };
            Ok(PosteriorSummary {
                mean,
                cov,
                restricted_mean,
                restricted_cov,
                inside_mass,
                tail_mass: (1.0 - inside_mass) / inside_mass,
                ess,
                ess_per_coord,
                mean_se,
                exact: false,
                low_precision: ess < LOW_ESS || !s.meta.acceptance_ok,
            })
        }
    }
}

/// Which posterior moments feed the discrepancy metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentKind {
    #[default]
    Full,
    Restricted,
}

impl PosteriorSummary {
    pub fn moments(&self, kind: MomentKind) -> (&Vector, &Matrix) {
        match kind {
            MomentKind::Full => (&self.mean, &self.cov),
            MomentKind::Restricted => (&self.restricted_mean, &self.restricted_cov),
        }
    }

    /// Covariance projected onto the PSD cone, with a flag when projection
    /// changed it.
    pub fn psd_cov(&self, kind: MomentKind) -> (Matrix, bool) {
        project_psd(self.moments(kind).1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgfEstimate {
    pub lambda: Vec<f64>,
    pub log_mgf: f64,
    pub se: f64,
}

/// Standardized draws `D0 (theta - theta_circ)`, restricted to `Theta0(r0)`
/// when requested.
fn standardized_draws(s: &PosteriorSample, geom: &LocalGeometry, state: &ScoreState, kind: MomentKind) -> Vec<Vector> {
    (0..s.len())
        .map(|i| s.draw(i))
        .filter(|t| kind == MomentKind::Full || geom.local_radius(t) <= geom.r0)
        .map(|t| &geom.d0 * (t - &state.theta_circ))
        .collect()
}

/// Log-MGF of `lambda^T D0 (theta - theta_circ)` under the posterior.
pub fn posterior_mgf(
    post: &Posterior,
    geom: &LocalGeometry,
    state: &ScoreState,
    lambdas: &[Vector],
    kind: MomentKind,
    stream: RngStream,
) -> Result<Vec<MgfEstimate>> {
    let p = geom.p as f64;
    for l in lambdas {
        if l.len() != geom.p {
            return Err(BvmError::DimensionMismatch {
                expected: geom.p,
                got: l.len(),
            });
        }
        if l.norm_squared() > p * (1.0 + 1e-12) {
            return Err(invalid(format!("|lambda|^2 = {} exceeds p = {p}", l.norm_squared())));
        }
    }
    let sample_holder;
    let draws: Vec<Vector> = match (post, kind) {
        (Posterior::Exact(g), MomentKind::Full) => {
            let mu = &geom.d0 * (&g.mean - &state.theta_circ);
            let s = &geom.d0 * &g.cov * &geom.d0;
            return Ok(lambdas
                .iter()
                .map(|l| MgfEstimate {
                    lambda: l.iter().copied().collect(),
                    log_mgf: l.dot(&mu) + 0.5 * l.dot(&(&s * l)),
                    se: 0.0,
                })
                .collect());
        }
        (Posterior::Exact(g), MomentKind::Restricted) => {
            sample_holder = gaussian_draws(g, ORACLE_DRAWS, stream)?;
            standardized_draws(&sample_holder, geom, state, kind)
        }
        (Posterior::Sample(s), _) => standardized_draws(s, geom, state, kind),
    };
    if draws.is_empty() {
        return Err(invalid("no posterior draws inside the local set"));
    }
    Ok(lambdas
        .iter()
        .map(|l| {
            let t: Vec<f64> = draws.iter().map(|w| l.dot(w)).collect();
            let (log_mgf, se) = log_mean_exp_batched(&t);
            MgfEstimate {
                lambda: l.iter().copied().collect(),
                log_mgf,
                se,
            }
        })
        .collect())
}

/// `log mean exp(t)` with a batch-means standard error.
fn log_mean_exp_batched(t: &[f64]) -> (f64, f64) {
    let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return (m, f64::NAN);
    }
    let w: Vec<f64> = t.iter().map(|v| (v - m).exp()).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let b = MGF_BATCHES.min(w.len());
    let size = w.len() / b;
    let batch: Vec<f64> = (0..b).map(|k| w[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let bm = batch.iter().sum::<f64>() / b as f64;
    let var = batch.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (b.max(2) - 1) as f64;
    (m + mean.ln(), (var / b as f64).sqrt() / mean)
}

/// Independent draws from a Gaussian posterior, packaged as a sample.
pub fn gaussian_draws(g: &GaussianPosterior, draws: usize, stream: RngStream) -> Result<PosteriorSample> {
    let p = g.mean.len();
    let root = spd_sqrt(&g.cov, "posterior covariance")?;
    let mut rng = stream.rng();
    let mut values = Vec::with_capacity(draws * p);
    for _ in 0..draws {
        let z = Vector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        values.extend((&g.mean + &root * z).iter());
    }
    Ok(PosteriorSample {
        p,
        chains: 1,
        values,
        log_weights: None,
        meta: ChainMeta {
            acceptance_rate: vec![1.0],
            step_scale: vec![0.0],
            burn_in: 0,
            seed: stream,
            acceptance_ok: true,
        },
    })
}

/// Events in the coordinates `w = D0 (theta - theta_circ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SetSpec {
    Full,
    /// `|w|^2 <= radius_sq`.
    Ball { radius_sq: f64 },
    /// `(w - center)^T shape (w - center) <= z`.
    Ellipsoid { center: Vec<f64>, shape: Matrix, z: f64 },
    /// `normal^T w > offset`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    Complement { inner: Box<SetSpec> },
}

impl SetSpec {
    pub fn contains(&self, w: &Vector) -> bool {
        match self {
            SetSpec::Full => true,
            SetSpec::Ball { radius_sq } => w.norm_squared() <= *radius_sq,
            SetSpec::Ellipsoid { center, shape, z } => {
                let d = w - Vector::from_column_slice(center);
                d.dot(&(shape * &d)) <= *z
            }
            SetSpec::HalfSpace { normal, offset } => Vector::from_column_slice(normal).dot(w) > *offset,
            SetSpec::Complement { inner } => !inner.contains(w),
        }
    }

    fn check(&self, p: usize) -> Result<()> {
        let bad = match self {
            SetSpec::Ellipsoid { center, shape, .. } => center.len() != p || shape.nrows() != p || shape.ncols() != p,
            SetSpec::HalfSpace { normal, .. } => normal.len() != p,
            SetSpec::Complement { inner } => return inner.check(p),
            _ => false,
        };
        if bad {
            return Err(invalid("set dimensions do not match the parameter"));
        }
        Ok(())
    }

    /// Probability under `N(mu, S)`, in closed form where one exists.
    fn gaussian_probability(&self, mu: &Vector, s: &Matrix) -> Option<f64> {
        let p = mu.len();
        match self {
            SetSpec::Full => Some(1.0),
            SetSpec::Ball { radius_sq } if (s - Matrix::identity(p, p)).amax() <= 1e-12 => {
                Some(noncentral_chi2_cdf(p as f64, mu.norm_squared(), *radius_sq))
            }
            SetSpec::HalfSpace { normal, offset } => {
                let a = Vector::from_column_slice(normal);
                let sd = a.dot(&(s * &a)).sqrt();
                Some(1.0 - norm_cdf((offset - a.dot(mu)) / sd))
            }
            SetSpec::Complement { inner } => inner.gaussian_probability(mu, s).map(|q| 1.0 - q),
            _ => None,
        }
    }

    /// Probability under the standard Gaussian.
    pub fn standard_gaussian_probability(&self, p: usize, stream: RngStream) -> Result<(f64, f64)> {
        let post = GaussianPosterior {
            mean: Vector::zeros(p),
            cov: Matrix::identity(p, p),
        };
        let mu = Vector::zeros(p);
        let s = Matrix::identity(p, p);
        if let Some(v) = self.gaussian_probability(&mu, &s) {
            return Ok((v, 0.0));
        }
        let sample = gaussian_draws(&post, ORACLE_DRAWS, stream)?;
        Ok(fraction(self, (0..sample.len()).map(|i| sample.draw(i)), ORACLE_DRAWS as f64))
    }
}

/// Probability of `set` under `N(mu, S)`: closed form when available,
/// otherwise the fraction of `ORACLE_DRAWS` seeded draws.
pub fn gaussian_set_probability(set: &SetSpec, mu: &Vector, s: &Matrix, stream: RngStream) -> Result<(f64, f64)> {
    set.check(mu.len())?;
    if let Some(v) = set.gaussian_probability(mu, s) {
        return Ok((v, 0.0));
    }
    let g = GaussianPosterior {
        mean: mu.clone(),
        cov: s.clone(),
    };
    let sample = gaussian_draws(&g, ORACLE_DRAWS, stream)?;
    Ok(fraction(set, (0..sample.len()).map(|i| sample.draw(i)), ORACLE_DRAWS as f64))
}

fn fraction(set: &SetSpec, ws: impl Iterator<Item = Vector>, ess: f64) -> (f64, f64) {
    let (mut hits, mut total) = (0usize, 0usize);
    for w in ws {
        hits += set.contains(&w) as usize;
        total += 1;
    }
    let q = hits as f64 / total as f64;
    (q, (q * (1.0 - q) / ess.min(total as f64)).sqrt())
}

/// Posterior probability of `{ D0 (theta - theta_circ) in set }` with its
/// standard error.
pub fn set_probability(
    post: &Posterior,
    geom: &LocalGeometry,
    state: &ScoreState,
    set: &SetSpec,
    ess: f64,
    stream: RngStream,
) -> Result<(f64, f64)> {
    set.check(geom.p)?;
    match post {
        Posterior::Exact(g) => {
            let mu = &geom.d0 * (&g.mean - &state.theta_circ);
            let s = symmetrize(&(&geom.d0 * &g.cov * &geom.d0));
            if let Some(v) = set.gaussian_probability(&mu, &s) {
                return Ok((v, 0.0));
            }
            let sample = gaussian_draws(g, ORACLE_DRAWS, stream)?;
            let ws = (0..sample.len()).map(|i| &geom.d0 * (sample.draw(i) - &state.theta_circ));
            Ok(fraction(set, ws, ORACLE_DRAWS as f64))
        }
        Posterior::Sample(s) => {
            let ws = (0..s.len()).map(|i| &geom.d0 * (s.draw(i) - &state.theta_circ));
            Ok(fraction(set, ws, ess))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawSidecar {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub layout: String,
    pub seed: u64,
    pub stream_index: u64,
    pub burn_in: usize,
    pub chains: usize,
    pub acceptance_rate: Vec<f64>,
    pub step_scale: Vec<f64>,
}

/// Write the draws as a little-endian `f64` row-major matrix to `bin_path`
/// and its description to `bin_path` with extension `.json`.
pub fn dump_draws(sample: &PosteriorSample, bin_path: &Path) -> Result<()> {
    let io = |e: std::io::Error| BvmError::Io {
        path: bin_path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(bin_path).map_err(io)?);
    for v in &sample.values {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let sidecar = DrawSidecar {
        rows: sample.len(),
        cols: sample.p,
        dtype: "float64-le".into(),
        layout: "row-major".into(),
        seed: sample.meta.seed.seed,
        stream_index: sample.meta.seed.stream_index,
        burn_in: sample.meta.burn_in,
        chains: sample.chains,
        acceptance_rate: sample.meta.acceptance_rate.clone(),
        step_scale: sample.meta.step_scale.clone(),
    };
    let json_path = bin_path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| BvmError::Serialization(e.to_string()))?;
    std::fs::write(&json_path, text).map_err(|e| BvmError::Io {
        path: json_path.display().to_string(),
        source: e,
    })
}

/// Read a matrix written by [`dump_draws`].
pub fn load_draws(bin_path: &Path) -> Result<(DrawSidecar, Vec<f64>)> {
    let json_path = bin_path.with_extension("json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| BvmError::Io {
        path: json_path.display().to_string(),
        source: e,
    })?;
    let meta: DrawSidecar = serde_json::from_str(&text).map_err(|e| BvmError::Serialization(e.to_string()))?;
    let bytes = std::fs::read(bin_path).map_err(|e| BvmError::Io {
        path: bin_path.display().to_string(),
        source: e,
    })?;
    if bytes.len() != meta.rows * meta.cols * 8 {
        return Err(BvmError::Serialization("draw file size does not match its sidecar".into()));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((meta, values))
}
