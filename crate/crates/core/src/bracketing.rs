//! Bracketing errors of the log-likelihood ratio, the spread, and the
//! posterior error budgets built from them. Also hosts closed-form bounds for
//! restricted Gaussian exponential moments.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::polish_on_sphere;
use crate::error::{invalid, Result};
use crate::geometry::{bracket_quadratic_std, BracketPair, LocalGeometry, Side};
use crate::linalg::Vector;
use crate::model::{self, Dataset, QuasiModel};
use crate::rng::RngStream;
use crate::sampling::{unit_directions, ShellPlan};
use crate::special::{chi2_sf, noncentral_chi2_sf};

/// Sampled suprema of the two one-sided bracketing gaps over `Theta0(r0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BracketErrors {
    /// `max(0, sup L(theta, theta*) - Lambda_ub)`.
    pub err_ub: f64,
    /// `max(0, sup Lambda_lb - L(theta, theta*))`.
    pub err_lb: f64,
    pub raw_ub: f64,
    pub raw_lb: f64,
    /// `sup Lambda_ub - L(theta, theta*)`: how far the upper bracket sits above.
    pub slack_ub: f64,
    /// `sup L(theta, theta*) - Lambda_lb`.
    pub slack_lb: f64,
    pub n_points: usize,
    pub skipped_points: usize,
}

impl BracketErrors {
    /// `err_ub / (rd p)`; the bound carries an unspecified constant, so only
    /// the ratio is reported.
    pub fn rd_p_ratio(&self, rd: f64, p: usize) -> f64 {
        self.err_ub / (rd * p as f64)
    }
}

#[derive(Clone, Copy)]
enum Gap {
    Upper,
    Lower,
    SlackUpper,
    SlackLower,
}

fn gap(kind: Gap, l: f64, pair: &BracketPair, u: &Vector) -> f64 {
    match kind {
        Gap::Upper => l - bracket_quadratic_std(pair, Side::Upper, u),
        Gap::Lower => bracket_quadratic_std(pair, Side::Lower, u) - l,
        Gap::SlackUpper => bracket_quadratic_std(pair, Side::Upper, u) - l,
        Gap::SlackLower => l - bracket_quadratic_std(pair, Side::Lower, u),
    }
}

/// Evaluates `L(theta, theta*)` at standardized offset `u`; `None` outside
/// the domain.
fn loglik_ratio_std(model: &dyn QuasiModel, data: &Dataset, geom: &LocalGeometry, base: f64, u: &Vector) -> Result<Option<f64>> {
    let theta = geom.from_standardized(u);
    if !model.domain().contains(&theta) {
        return Ok(None);
    }
    Ok(Some(model::log_lik(model, data, &theta)? - base))
}

pub fn estimate_err_brackets(
    model: &dyn QuasiModel,
    data: &Dataset,
    geom: &LocalGeometry,
    pair: &BracketPair,
    plan: &ShellPlan,
) -> Result<BracketErrors> {
    if plan.is_empty() {
        return Err(invalid("sample plan is empty"));
    }
    let base = model::log_lik(model, data, &geom.theta_star)?;
    let kinds = [Gap::Upper, Gap::Lower, Gap::SlackUpper, Gap::SlackLower];
    // per radius: best value and direction for each gap kind
    let per_radius: Vec<([(f64, usize); 4], usize)> = plan
        .radii
        .par_iter()
        .map(|&r| {
            let mut best = [(f64::NEG_INFINITY, usize::MAX); 4];
            let mut skipped = 0;
            for (j, d) in plan.directions.iter().enumerate() {
                let u = d * r;
                match loglik_ratio_std(model, data, geom, base, &u)? {
                    Some(l) => {
                        for (k, &kind) in kinds.iter().enumerate() {
                            let g = gap(kind, l, pair, &u);
                            if g > best[k].0 {
                                best[k] = (g, j);
                            }
                        }
                    }
                    None => skipped += 1,
                }
            }
            Ok((best, skipped))
        })
        .collect::<Result<_>>()?;
    // the center contributes a zero gap on every side
    let mut sup = [0.0f64; 4];
    for (k, &kind) in kinds.iter().enumerate() {
        let (mut v, mut at) = (f64::NEG_INFINITY, None);
        for (i, (best, _)) in per_radius.iter().enumerate() {
            if best[k].1 != usize::MAX && best[k].0 > v {
                v = best[k].0;
                at = Some((i, best[k].1));
            }
        }
        if let Some((i, j)) = at {
            let r = plan.radii[i];
            v = polish_on_sphere(&plan.directions[j], v, plan.polish_steps, |d| {
                let u = d * r;
                Ok(loglik_ratio_std(model, data, geom, base, &u)?.map(|l| gap(kind, l, pair, &u)))
            })?;
        }
        sup[k] = v.max(0.0);
    }
    let skipped: usize = per_radius.iter().map(|x| x.1).sum();
    Ok(BracketErrors {
        err_ub: sup[0],
        err_lb: sup[1],
        raw_ub: sup[0],
        raw_lb: sup[1],
        slack_ub: sup[2],
        slack_lb: sup[3],
        n_points: plan.directions.len() * plan.radii.len() + 1 - skipped,
        skipped_points: skipped,
    })
}

/// `err_ub + err_lb + (|xi_ub|^2 - |xi_lb|^2) / 2`.
pub fn spread_delta(err_ub: f64, err_lb: f64, pair: &BracketPair) -> f64 {
    err_ub + err_lb + 0.5 * (pair.xi_ub.norm_squared() - pair.xi_lb.norm_squared())
}

/// `-log P(|gamma + xi| <= r0)` for standard normal `gamma`.
pub fn nu_r0(xi: &Vector, r0: f64) -> Result<f64> {
    if !(r0 > 0.0) {
        return Err(invalid(format!("radius must be positive, got {r0}")));
    }
    let outside = noncentral_chi2_sf(xi.len() as f64, xi.norm_squared(), r0 * r0);
    Ok(-(-outside).ln_1p())
}

/// Monte Carlo estimate of `P(|gamma + xi| <= r0)` with its standard error.
pub fn inside_probability_mc(xi: &Vector, r0: f64, draws: usize, stream: RngStream) -> (f64, f64) {
    let chunks = 64usize;
    let per = draws.div_ceil(chunks);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.substream(c as u64).rng();
            let m = per.min(draws.saturating_sub(c * per));
            (0..m)
                .filter(|_| {
                    let s: f64 = xi
                        .iter()
                        .map(|&x| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            (g + x) * (g + x)
                        })
                        .sum();
                    s <= r0 * r0
                })
                .count()
        })
        .sum();
    let prob = hits as f64 / draws as f64;
    (prob, (prob * (1.0 - prob) / draws as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoBound {
    pub bound: f64,
    /// `b r0^2 <= p`: the tail factor is of order one.
    pub vacuous: bool,
}

/// `exp(err_lb + nu(r0)) ((1 + rd) / b)^(p/2) P(|gamma|^2 >= b r0^2)`.
pub fn rho_upper_bound(err_lb: f64, nu_r0: f64, p: usize, r0: f64, b_r0: f64, rd: f64) -> Result<RhoBound> {
    if !(b_r0 > 0.0) {
        return Err(invalid(format!("identification strength must be positive, got {b_r0}")));
    }
    let pf = p as f64;
    let tail = chi2_sf(pf, b_r0 * r0 * r0);
    let log_bound = err_lb + nu_r0 + 0.5 * pf * ((1.0 + rd) / b_r0).ln() + tail.ln();
    Ok(RhoBound {
        bound: log_bound.exp(),
        vacuous: b_r0 * r0 * r0 <= pf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailContract {
    pub measured: f64,
    pub measured_se: f64,
    pub bound: f64,
    pub vacuous: bool,
    /// `measured / bound`.
    pub ratio: f64,
    pub pass: bool,
}

/// Compare a measured posterior tail ratio against its theoretical bound.
pub fn tail_mass_contract(measured: f64, measured_se: f64, bound: &RhoBound) -> TailContract {
    TailContract {
        measured,
        measured_se,
        bound: bound.bound,
        vacuous: bound.vacuous,
        ratio: measured / bound.bound,
        pass: measured <= bound.bound,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub rd: f64,
    pub err_ub: f64,
    pub err_lb: f64,
    pub spread: f64,
    pub nu_r0: f64,
    pub rho_r0: f64,
    /// `(p/2) log((1 + rd) / (1 - rd))`.
    pub log_det_correction: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub delta_oplus: f64,
    /// `p + |xi|^2`.
    pub q: f64,
    /// `spread / (rd q)`.
    pub spread_ratio: f64,
}

pub fn error_budget(err_ub: f64, err_lb: f64, pair: &BracketPair, nu_r0: f64, rho_r0: f64, p: usize) -> ErrorBudget {
    let rd = pair.rd;
    let pf = p as f64;
    let xi_norm = pair.xi_ub.norm() * pair.scale_ub;
    let spread = spread_delta(err_ub, err_lb, pair);
    let log_det_correction = 0.5 * pf * ((1.0 + rd) / (1.0 - rd)).ln();
    let delta_plus = spread + log_det_correction + nu_r0;
    let delta_minus = spread + log_det_correction + rho_r0;
    let delta_oplus = delta_plus + rd * pf + 2.0 * rd * pf.sqrt() * xi_norm;
    let q = pf + xi_norm * xi_norm;
    ErrorBudget {
        rd,
        err_ub,
        err_lb,
        spread,
        nu_r0,
        rho_r0,
        log_det_correction,
        delta_plus,
        delta_minus,
        delta_oplus,
        q,
        spread_ratio: spread / (rd * q),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpperFunctionReport {
    /// `max L(theta, theta*) + b |D0 (theta - theta*)|^2 / 2` over the sample.
    pub worst_violation: f64,
    pub n_points: usize,
    pub pass: bool,
}

/// Shells outside `Theta0(r0)`: radii `r0 * 2^(k/2)` for `k = 0..radii`.
pub fn exterior_plan(geom: &LocalGeometry, directions: usize, radii: usize) -> ShellPlan {
    ShellPlan {
        directions: unit_directions(geom.p, directions),
        radii: (0..radii).map(|k| geom.r0 * 2f64.powf(k as f64 / 2.0)).collect(),
        polish_steps: 0,
    }
}

/// Largest violation of `L(theta, theta*) <= -b |D0 (theta - theta*)|^2 / 2`
/// over sampled points inside the domain.
pub fn upper_function_audit(
    model: &dyn QuasiModel,
    data: &Dataset,
    geom: &LocalGeometry,
    b: f64,
    plan: &ShellPlan,
) -> Result<UpperFunctionReport> {
    if !(b > 0.0) {
        return Err(invalid(format!("identification strength must be positive, got {b}")));
    }
    let base = model::log_lik(model, data, &geom.theta_star)?;
    let rows: Vec<(f64, usize)> = plan
        .radii
        .par_iter()
        .map(|&r| {
            let mut worst = f64::NEG_INFINITY;
            let mut count = 0;
            for d in &plan.directions {
                let u = d * r;
                if let Some(l) = loglik_ratio_std(model, data, geom, base, &u)? {
                    worst = worst.max(l + 0.5 * b * r * r);
                    count += 1;
                }
            }
            Ok((worst, count))
        })
        .collect::<Result<_>>()?;
    let worst_violation = rows.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
    let n_points = rows.iter().map(|x| x.1).sum();
    Ok(UpperFunctionReport {
        worst_violation,
        n_points,
        pass: worst_violation <= 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestrictedMgfBounds {
    /// Bound on `log E[exp(lambda^T gamma) 1(|gamma| > r)]`.
    pub upper_tail_log: f64,
    /// Bound on `E[exp(lambda^T gamma) 1(|gamma| <= r)]` from below.
    pub lower_restricted: f64,
}

pub fn gauss_restricted_mgf_bounds(lambda: &Vector, r: f64, mu: f64, x: f64) -> Result<RestrictedMgfBounds> {
    let p = lambda.len() as f64;
    let l2 = lambda.norm_squared();
    if !(mu > 0.0 && mu < 1.0) {
        return Err(invalid(format!("mu must lie in (0, 1), got {mu}")));
    }
    if !(r > 0.0) || !(x > 0.0) {
        return Err(invalid("radius and x must be positive"));
    }
    if l2 > p * (1.0 + 1e-12) {
        return Err(invalid(format!("|lambda|^2 = {l2} exceeds p = {p}")));
    }
    if r * r < 4.0 * (p + x) * (1.0 - 1e-12) {
        return Err(invalid(format!("r^2 = {} is below 4 (p + x) = {}", r * r, 4.0 * (p + x))));
    }
    Ok(RestrictedMgfBounds {
        upper_tail_log: -(1.0 - mu) * r * r / 2.0 + l2 / (2.0 * mu) + 0.5 * p * (1.0 / mu).ln(),
        lower_restricted: (l2 / 2.0).exp() * (1.0 - (-x).exp()),
    })
}

/// Restricted moments `E[exp(lambda^T gamma) 1(|gamma| > r)]` and
/// `E[exp(lambda^T gamma) 1(|gamma| <= r)]` in closed form: tilting by
/// `lambda` shifts `gamma` to `gamma + lambda`.
pub fn restricted_mgf_exact(lambda: &Vector, r: f64) -> (f64, f64) {
    let p = lambda.len() as f64;
    let l2 = lambda.norm_squared();
    let outside = noncentral_chi2_sf(p, l2, r * r);
    let full = (l2 / 2.0).exp();
    (full * outside, full * (1.0 - outside))
}

/// Monte Carlo estimate of the two restricted moments with standard errors,
/// using the tilted draws `gamma + lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestrictedMgfEstimate {
    pub outside: f64,
    pub outside_se: f64,
    pub inside: f64,
    pub inside_se: f64,
}

pub fn restricted_mgf_mc(lambda: &Vector, r: f64, draws: usize, stream: RngStream) -> RestrictedMgfEstimate {
    let (inside_prob, se) = inside_probability_mc(lambda, r, draws, stream);
    let full = (lambda.norm_squared() / 2.0).exp();
    RestrictedMgfEstimate {
        outside: full * (1.0 - inside_prob),
        outside_se: full * se,
        inside: full * inside_prob,
        inside_se: full * se,
    }
}
