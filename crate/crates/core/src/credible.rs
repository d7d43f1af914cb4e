//! Elliptic credible sets, their posterior mass, and frequentist coverage of
//! `theta*` by simulation.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BvmError, Result};
use crate::geometry::{score_state, LocalGeometry};
use crate::linalg::{project_psd, spd_inverse, spd_sqrt, sym_eigenvalues, symmetrize, Matrix, Vector};
use crate::model::{sample_dataset, QuasiModel, TrueProcess};
use crate::posterior::{compute_posterior, posterior_moments, Posterior, PosteriorMode, PosteriorSummary};
use crate::prior::Prior;
use crate::rng::{tags, RngStream};
use crate::special::{chi2_cdf, chi2_quantile, noncentral_chi2_cdf};

pub const SANDWICH_DRAWS: usize = 1_000_000;
pub const MIN_COVERAGE_REPS: usize = 100;
/// Share of failed replications above which a coverage scenario is invalid.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetKind {
    /// Centered at `theta_circ`, scaled by `D0^2`.
    Oracle,
    /// Centered at the posterior mean, scaled by the inverse posterior covariance.
    PosteriorMoment,
    /// Centered at the posterior mean, scaled by the Fisher information there.
    PluginFisher,
    /// Centered at the posterior mean, scaled by `D0 V0^-2 D0`.
    SandwichScaled,
}

impl SetKind {
    pub fn label(&self) -> &'static str {
        match self {
            SetKind::Oracle => "oracle",
            SetKind::PosteriorMoment => "posterior-moment",
            SetKind::PluginFisher => "plugin-fisher",
            SetKind::SandwichScaled => "sandwich-scaled",
        }
    }

    pub fn needs_posterior(&self) -> bool {
        !matches!(self, SetKind::Oracle)
    }
}

/// `{theta : (theta - center)^T scale_sq (theta - center) <= z}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleSet {
    pub kind: SetKind,
    pub center: Vector,
    pub scale_sq: Matrix,
    pub z: f64,
    pub alpha: Option<f64>,
    /// The scale was not PSD and was projected.
    pub projected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Level {
    Alpha(f64),
    Threshold(f64),
}

impl Level {
    fn resolve(&self, p: usize) -> Result<(f64, Option<f64>)> {
        match *self {
            Level::Alpha(a) if a > 0.0 && a < 1.0 => Ok((chi2_quantile(p, a), Some(a))),
            Level::Alpha(a) => Err(invalid(format!("alpha must lie in (0, 1), got {a}"))),
            Level::Threshold(z) if z >= 0.0 => Ok((z, None)),
            Level::Threshold(z) => Err(invalid(format!("threshold must be nonnegative, got {z}"))),
        }
    }
}

pub fn build_set(kind: SetKind, center: Vector, scale_sq: &Matrix, level: Level) -> Result<CredibleSet> {
    let p = center.len();
    if scale_sq.nrows() != p || scale_sq.ncols() != p {
        return Err(BvmError::DimensionMismatch {
            expected: p,
            got: scale_sq.nrows(),
        });
    }
    let (z, alpha) = level.resolve(p)?;
    let (scale_sq, projected) = project_psd(scale_sq);
    Ok(CredibleSet {
        kind,
        center,
        scale_sq,
        z,
        alpha,
        projected,
    })
}

/// Inputs for one set of the given kind.
pub fn set_for_kind(
    kind: SetKind,
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    geom: &LocalGeometry,
    theta_circ: &Vector,
    summary: Option<&PosteriorSummary>,
    level: Level,
) -> Result<CredibleSet> {
    let need = || summary.ok_or_else(|| invalid(format!("{} set needs posterior moments", kind.label())));
    match kind {
        SetKind::Oracle => build_set(kind, theta_circ.clone(), &geom.d0_sq, level),
        SetKind::PosteriorMoment => {
            let s = need()?;
            let (cov, _) = project_psd(&s.cov);
            let precision = spd_inverse(&symmetrize(&cov), "posterior covariance")?;
            build_set(kind, s.mean.clone(), &precision, level)
        }
        SetKind::PluginFisher => {
            let s = need()?;
            model.domain().check(&s.mean)?;
            let fisher = model.eval_parametric_fisher(truth, geom.n, &s.mean)?;
            build_set(kind, s.mean.clone(), &fisher, level)
        }
        SetKind::SandwichScaled => {
            let s = need()?;
            let v_inv = spd_inverse(&geom.v0_sq, "score covariance")?;
            build_set(kind, s.mean.clone(), &(&geom.d0_sq * v_inv * &geom.d0_sq), level)
        }
    }
}

pub fn set_membership(set: &CredibleSet, theta: &Vector) -> bool {
    let d = theta - &set.center;
    d.dot(&(&set.scale_sq * &d)) <= set.z
}

/// Posterior probability of the set with its standard error.
pub fn posterior_mass(set: &CredibleSet, post: &Posterior, ess: f64, stream: RngStream) -> Result<(f64, f64)> {
    let p = set.center.len();
    if post.dim() != p {
        return Err(BvmError::DimensionMismatch {
            expected: p,
            got: post.dim(),
        });
    }
    match post {
        Posterior::Exact(g) => {
            // A^{1/2} (theta - c) ~ N(A^{1/2} (m - c), A^{1/2} C A^{1/2})
            let root = spd_sqrt(&set.scale_sq, "credible set scale")?;
            let mu = &root * (&g.mean - &set.center);
            let s = symmetrize(&(&root * &g.cov * &root));
            if (&s - Matrix::identity(p, p)).amax() <= 1e-12 {
                return Ok((noncentral_chi2_cdf(p as f64, mu.norm_squared(), set.z), 0.0));
            }
            let draws = crate::posterior::gaussian_draws(g, crate::posterior::ORACLE_DRAWS, stream)?;
            Ok(fraction_inside(set, &draws, crate::posterior::ORACLE_DRAWS as f64))
        }
        Posterior::Sample(s) => Ok(fraction_inside(set, s, ess)),
    }
}

fn fraction_inside(set: &CredibleSet, s: &crate::posterior::PosteriorSample, ess: f64) -> (f64, f64) {
    let hits = (0..s.len()).filter(|&i| set_membership(set, &s.draw(i))).count();
    let q = hits as f64 / s.len() as f64;
    (q, (q * (1.0 - q) / ess.min(s.len() as f64)).sqrt())
}

/// Covariance of `xi`: `D0^-1 V0^2 D0^-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichSpec {
    pub m: Matrix,
    pub is_identity: bool,
}

pub fn sandwich_matrix(geom: &LocalGeometry) -> SandwichSpec {
    let m = geom.sandwich();
    let is_identity = (&m - Matrix::identity(geom.p, geom.p)).amax() <= 1e-9;
    SandwichSpec { m, is_identity }
}

/// `P(|m^{1/2} gamma|^2 <= z)`: closed form when `m` is the identity or
/// `p = 1`, otherwise Monte Carlo over the eigenvalues of `m`.
pub fn sandwich_coverage(spec: &SandwichSpec, z: f64, stream: RngStream) -> (f64, f64) {
    let p = spec.m.nrows();
    if spec.is_identity {
        return (chi2_cdf(p as f64, z), 0.0);
    }
    if p == 1 {
        return (chi2_cdf(1.0, z / spec.m[(0, 0)]), 0.0);
    }
    let eig: Vec<f64> = sym_eigenvalues(&spec.m).into_iter().map(|l| l.max(0.0)).collect();
    let mut rng = stream.rng();
    let hits = (0..SANDWICH_DRAWS)
        .filter(|_| {
            eig.iter()
                .map(|&l| {
                    let g: f64 = rng.sample(StandardNormal);
                    l * g * g
                })
                .sum::<f64>()
                <= z
        })
        .count();
    let q = hits as f64 / SANDWICH_DRAWS as f64;
    (q, (q * (1.0 - q) / SANDWICH_DRAWS as f64).sqrt())
}

pub struct CoverageScenario<'a> {
    pub label: String,
    pub model: &'a dyn QuasiModel,
    pub truth: &'a TrueProcess,
    pub prior: &'a Prior,
    pub geom: &'a LocalGeometry,
    pub mode: PosteriorMode,
    pub kind: SetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub scenario: String,
    pub kind: SetKind,
    pub alpha: f64,
    /// Successful replications.
    pub n_reps: usize,
    pub covered: usize,
    pub failed: usize,
    pub rate: f64,
    pub binomial_se: f64,
    pub target: f64,
    /// Coverage predicted by the sandwich argument; `1 - alpha` for the
    /// sandwich-scaled set.
    pub predicted: f64,
    pub valid: bool,
}

/// Repeat data generation, posterior and set construction; count how often
/// the set contains `theta*`. Replication `r` uses data stream
/// `stream.substream(DATA).substream(r)`.
pub fn coverage_mc(scenario: &CoverageScenario<'_>, alpha: f64, n_reps: usize, stream: RngStream) -> Result<CoverageResult> {
    if n_reps < MIN_COVERAGE_REPS {
        return Err(invalid(format!("coverage needs at least {MIN_COVERAGE_REPS} replications")));
    }
    let geom = scenario.geom;
    let level = Level::Alpha(alpha);
    let outcomes: Vec<Option<bool>> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let rep = || -> Result<bool> {
                let data = sample_dataset(scenario.truth, geom.n, stream.substream(tags::DATA).substream(r as u64))?;
                let state = score_state(scenario.model, &data, geom)?;
                let summary = if scenario.kind.needs_posterior() {
                    let post = compute_posterior(
                        scenario.model,
                        &data,
                        scenario.prior,
                        geom,
                        &scenario.mode,
                        stream.substream(tags::CHAIN).substream(r as u64),
                    )?;
                    Some(posterior_moments(&post, geom, stream.substream(tags::ORACLE).substream(r as u64))?)
                } else {
                    None
                };
                let set = set_for_kind(
                    scenario.kind,
                    scenario.model,
                    scenario.truth,
                    geom,
                    &state.theta_circ,
                    summary.as_ref(),
                    level,
                )?;
                Ok(set_membership(&set, &geom.theta_star))
            };
            rep().ok()
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    let ok = n_reps - failed;
    let covered = outcomes.iter().filter(|o| **o == Some(true)).count();
    let rate = if ok > 0 { covered as f64 / ok as f64 } else { f64::NAN };
    let z = chi2_quantile(geom.p, alpha);
    // the sandwich-scaled set already standardizes by the sandwich covariance
    let predicted = match scenario.kind {
        SetKind::SandwichScaled => 1.0 - alpha,
        _ => sandwich_coverage(&sandwich_matrix(geom), z, stream.substream(tags::ORACLE).substream(u64::MAX)).0,
    };
    Ok(CoverageResult {
        scenario: scenario.label.clone(),
        kind: scenario.kind,
        alpha,
        n_reps: ok,
        covered,
        failed,
        rate,
        binomial_se: (rate * (1.0 - rate) / ok.max(1) as f64).sqrt(),
        target: 1.0 - alpha,
        predicted,
        valid: (failed as f64) <= MAX_FAILURE_SHARE * n_reps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compute_geometry, GeometryOptions};
    use crate::model::{Covariates, GlmModel, ResponseLaw};
    use crate::posterior::GaussianPosterior;

    #[test]
    fn membership_and_plugin_width() {
        let set = build_set(SetKind::PluginFisher, Vector::from_vec(vec![2.0]), &Matrix::from_element(1, 1, 4.0), Level::Alpha(0.05)).unwrap();
        assert!(set_membership(&set, &Vector::from_vec(vec![2.0])));
        let half = (set.z / 4.0).sqrt();
        // sqrt(3.8414588 / 4)
        assert!((half - 0.979_981_992_270_027_5).abs() < 1e-10);
        assert!(set_membership(&set, &Vector::from_vec(vec![2.0 + half * 0.999999])));
        assert!(!set_membership(&set, &Vector::from_vec(vec![2.0 + half * 1.000001])));
    }

    #[test]
    fn exact_mass_of_oracle_set() {
        let p = 3;
        let post = Posterior::Exact(GaussianPosterior {
            mean: Vector::from_vec(vec![0.1, 0.2, 0.3]),
            cov: Matrix::identity(p, p) * 0.25,
        });
        let set = build_set(SetKind::Oracle, Vector::from_vec(vec![0.1, 0.2, 0.3]), &(Matrix::identity(p, p) * 4.0), Level::Alpha(0.1)).unwrap();
        let (m, se) = posterior_mass(&set, &post, f64::INFINITY, RngStream::new(0, 0)).unwrap();
        assert!((m - 0.9).abs() < 1e-10 && se == 0.0);
        let wide = build_set(SetKind::Oracle, set.center.clone(), &set.scale_sq, Level::Threshold(1e6)).unwrap();
        assert!((posterior_mass(&wide, &post, f64::INFINITY, RngStream::new(0, 0)).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sandwich_examples() {
        let one = SandwichSpec {
            m: Matrix::from_element(1, 1, 2.0),
            is_identity: false,
        };
        let z = chi2_quantile(1, 0.05);
        // P(chi2_1 <= 3.8414588 / 2), scipy reference
        assert!((sandwich_coverage(&one, z, RngStream::new(0, 0)).0 - 0.834_223_727_104_296_3).abs() < 1e-10);
        let id = SandwichSpec {
            m: Matrix::identity(2, 2),
            is_identity: true,
        };
        assert!((sandwich_coverage(&id, 3.0, RngStream::new(0, 0)).0 - chi2_cdf(2.0, 3.0)).abs() < 1e-15);
        let mixed = SandwichSpec {
            m: Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.5])),
            is_identity: false,
        };
        let (c, _) = sandwich_coverage(&mixed, chi2_quantile(2, 0.05), RngStream::new(1, 0));
        assert!(c > chi2_cdf(2.0, chi2_quantile(2, 0.05) / 2.0) && c < chi2_cdf(2.0, chi2_quantile(2, 0.05) / 0.5));
    }

    #[test]
    fn well_specified_oracle_coverage() {
        let n = 20;
        let model = GlmModel::gaussian_linear(1, 1.0).unwrap();
        let truth = TrueProcess {
            response: ResponseLaw::GaussianNoise { sd: 1.0 },
            coef: Vector::from_vec(vec![0.3]),
            covariates: Covariates::intercept(n),
            matches_model: true,
        };
        let geom = compute_geometry(&model, &truth, n, &GeometryOptions::default()).unwrap();
        let sc = CoverageScenario {
            label: "gaussian-mean".into(),
            model: &model,
            truth: &truth,
            prior: &Prior::Flat,
            geom: &geom,
            mode: PosteriorMode::Exact,
            kind: SetKind::Oracle,
        };
        let r = coverage_mc(&sc, 0.05, 1000, RngStream::new(2, 0)).unwrap();
        assert!((r.rate - 0.95).abs() <= 4.0 * (0.05f64 * 0.95 / 1000.0).sqrt());
        assert!((r.predicted - 0.95).abs() < 1e-9 && r.valid);
        assert!(coverage_mc(&sc, 0.05, 10, RngStream::new(2, 0)).is_err());
    }
}
