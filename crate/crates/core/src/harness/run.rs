//! Scenario assembly and the per-replication pipeline.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DesignKind, ExperimentConfig, PriorSpec, RdSource};
use crate::audit::{audit_conditions, gaussian_prior_check, ConditionProfile, GaussianPriorCheck};
use crate::bracketing::{
    error_budget, estimate_err_brackets, exterior_plan, nu_r0, rho_upper_bound, tail_mass_contract, BracketErrors, ErrorBudget,
    upper_function_audit, TailContract,
};
use crate::credible::{
    coverage_mc, set_for_kind, set_membership, CoverageResult, CoverageScenario, Level,
};
use crate::error::Result;
use crate::geometry::{bracket_pair, compute_geometry, score_state, GeometryOptions, LocalGeometry};
use crate::linalg::{Matrix, Vector};
use crate::metrics::{
    bvm_report, shell_check, default_probes, prob_sandwich_check, random_lambdas, BvmReport, ShellRecord, ProbRecord,
};
use crate::model::{sample_dataset, Covariates, Family, GlmModel, QuasiModel, TrueProcess};
use crate::posterior::{compute_posterior, posterior_moments, Posterior, PosteriorSample};
use crate::prior::Prior;
use crate::rng::{tags, RngStream};

/// Shells outside `Theta0(r0)` for the upper-function check.
const EXTERIOR_RADII: usize = 6;

/// Model, true process, prior and geometry of one configuration.
pub struct Scenario {
    pub model: GlmModel,
    pub truth: TrueProcess,
    pub prior: Prior,
    pub geom: LocalGeometry,
    pub prior_check: Option<GaussianPriorCheck>,
}

pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    let (n, p) = (cfg.model.n, cfg.model.p);
    let model = match cfg.model.family {
        Family::GaussianLinear => GlmModel::gaussian_linear(p, cfg.sigma())?,
        Family::Logistic => GlmModel::logistic(p)?,
        Family::Poisson => GlmModel::poisson(p)?,
        Family::Custom => unreachable!("rejected by validation"),
    };
    let root = RngStream::new(cfg.seed, 0);
    let covariates = match cfg.truth.design {
        DesignKind::Fixed => {
            let Covariates::Fixed(x) = Covariates::fixed_gaussian(n, p, root.substream(tags::DESIGN)) else {
                unreachable!()
            };
            Covariates::Fixed(std::sync::Arc::new(&*x * cfg.truth.design_scale))
        }
        DesignKind::Gaussian => Covariates::Gaussian {
            p,
            scale: cfg.truth.design_scale,
        },
        DesignKind::Intercept => Covariates::intercept(n),
    };
    let response = cfg.truth.response.unwrap_or_else(|| model.native_response());
    let truth = TrueProcess {
        response,
        coef: Vector::from_vec(cfg.coef()),
        covariates,
        matches_model: response == model.native_response(),
    };
    let opts = GeometryOptions {
        x_n: cfg.geometry.x_n,
        r0_normalization: cfg.geometry.r0_normalization,
        r0: cfg.geometry.r0,
        ..Default::default()
    };
    let geom = compute_geometry(&model, &truth, n, &opts)?;
    let (prior, prior_check) = match cfg.prior {
        PriorSpec::Flat => (Prior::Flat, None),
        PriorSpec::Gaussian { g, smallness } => {
            let g_sq = match (g, smallness) {
                (Some(g), _) => Matrix::identity(p, p) * (g * g),
                (None, Some(s)) => &geom.d0_sq * (s / p as f64),
                (None, None) => unreachable!("rejected by validation"),
            };
            let check = gaussian_prior_check(&g_sq, &geom, crate::audit::DEFAULT_PRIOR_THRESHOLD)?;
            (Prior::gaussian(g_sq)?, Some(check))
        }
    };
    Ok(Scenario {
        model,
        truth,
        prior,
        geom,
        prior_check,
    })
}

/// Everything measured on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    /// `|xi|^2`.
    pub xi_norm_sq: f64,
    pub bracket: Option<BracketErrors>,
    pub bvm: BvmReport,
    pub inside_mass: f64,
    #[serde(with = "crate::serde_util::nonfinite")]
    pub ess: f64,
    /// Sampled upper-function condition outside `Theta0(r0)` on this dataset.
    pub upper_function_pass: Option<bool>,
    /// Posterior tail against its bound; only when the upper function holds.
    pub tail: Option<TailContract>,
    pub probes: Vec<ProbRecord>,
    pub shell: Vec<ShellRecord>,
    /// Whether the configured credible set contains `theta*`.
    pub covered: Option<bool>,
    #[serde(skip)]
    pub draws: Option<PosteriorSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub result: std::result::Result<Replication, String>,
}

/// Which `rd` the replications use and where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdChoice {
    pub value: f64,
    pub source: RdSource,
    pub applicable: bool,
}

pub fn choose_rd(cfg: &ExperimentConfig, profile: Option<&ConditionProfile>) -> RdChoice {
    let value = match (cfg.bracketing.rd_source, profile) {
        (RdSource::Fixed, _) => cfg.bracketing.rd.expect("validated"),
        (RdSource::FromConditions, Some(p)) => p.rd.rd,
        (RdSource::FromConditions, None) => f64::NAN,
    };
    RdChoice {
        value,
        source: cfg.bracketing.rd_source,
        applicable: value <= crate::audit::CONDITION_CAP,
    }
}

pub fn run_audit(cfg: &ExperimentConfig, sc: &Scenario) -> Result<ConditionProfile> {
    audit_conditions(
        &sc.model,
        &sc.truth,
        &sc.geom,
        &cfg.audit,
        RngStream::new(cfg.seed, 0).substream(tags::AUDIT),
    )
}

fn replicate(
    cfg: &ExperimentConfig,
    sc: &Scenario,
    profile: Option<&ConditionProfile>,
    rd: f64,
    rep: usize,
) -> Result<Replication> {
    let root = RngStream::new(cfg.seed, 0);
    let oracle = root.substream(tags::ORACLE).substream(rep as u64);
    let geom = &sc.geom;
    let model: &dyn QuasiModel = &sc.model;
    let data = sample_dataset(&sc.truth, geom.n, root.substream(tags::DATA).substream(rep as u64))?;
    let state = score_state(model, &data, geom)?;
    let post = compute_posterior(
        model,
        &data,
        &sc.prior,
        geom,
        &cfg.posterior.posterior_mode(),
        root.substream(tags::CHAIN).substream(rep as u64),
    )?;
    let summary = posterior_moments(&post, geom, oracle.substream(0))?;
    let bracketable = (0.0..1.0).contains(&rd);
    let (pair, bracket, budget) = if bracketable {
        let pair = bracket_pair(geom, &state, rd)?;
        let plan = cfg.bracketing.shell_plan(geom.p, geom.r0);
        let errs = estimate_err_brackets(model, &data, geom, &pair, &plan)?;
        let nu = nu_r0(&state.xi, geom.r0)?;
        let budget = error_budget(errs.err_ub, errs.err_lb, &pair, nu, summary.tail_mass, geom.p);
        (Some(pair), Some(errs), Some(budget))
    } else {
        (None, None, None)
    };
    let lambdas = random_lambdas(geom.p, cfg.metrics.mgf_lambdas, oracle.substream(1));
    let probes = default_probes(geom.p);
    let mut bvm = bvm_report(
        &post,
        &summary,
        geom,
        &state,
        cfg.metrics.moments,
        &lambdas,
        &probes,
        rd,
        budget,
        oracle.substream(2),
    )?;
    bvm.flags.conditions_flagged = profile.is_some_and(|p| p.flags.any());
    let (probe_records, shell) = match (&pair, &budget) {
        (Some(pair), Some(budget)) => {
            let records = prob_sandwich_check(
                &post,
                geom,
                &state,
                pair,
                &probes,
                budget,
                cfg.metrics.slack,
                summary.ess,
                oracle.substream(3),
            )?;
            let xs: Vec<f64> = cfg.metrics.shell_x.iter().copied().filter(|&x| x <= geom.p as f64 / 2.0).collect();
            // unsupported for a closed-form posterior with non-scalar standardized covariance
            let shell = shell_check(&post, geom, pair, &xs, budget.delta_plus).unwrap_or_default();
            (records, shell)
        }
        _ => (Vec::new(), Vec::new()),
    };
    // the tail bound presumes the upper function holds on this dataset
    let (upper_function_pass, tail) = match (profile, &budget) {
        (Some(prof), Some(budget)) if prof.b.profile.at_last() > 0.0 => {
            let b_r0 = prof.b.profile.at_last();
            let plan = exterior_plan(geom, cfg.bracketing.shell_plan(geom.p, geom.r0).directions.len(), EXTERIOR_RADII);
            let upper = upper_function_audit(model, &data, geom, b_r0, &plan)?.pass;
            let tail = if upper {
                rho_upper_bound(budget.err_lb, budget.nu_r0, geom.p, geom.r0, b_r0, rd)
                    .ok()
                    .map(|bound| tail_mass_contract(summary.tail_mass, tail_se(&summary), &bound))
            } else {
                None
            };
            (Some(upper), tail)
        }
        _ => (None, None),
    };
    let covered = match &cfg.coverage {
        Some(c) => {
            let set = set_for_kind(c.kind, model, &sc.truth, geom, &state.theta_circ, Some(&summary), Level::Alpha(c.alpha))?;
            Some(set_membership(&set, &geom.theta_star))
        }
        None => None,
    };
    let draws = match post {
        Posterior::Sample(s) if rep == 0 && cfg.posterior.dump_draws => Some(s),
        _ => None,
    };
    Ok(Replication {
        rep,
        xi_norm_sq: state.xi.norm_squared(),
        bracket,
        bvm,
        inside_mass: summary.inside_mass,
        ess: summary.ess,
        upper_function_pass,
        tail,
        probes: probe_records,
        shell,
        covered,
        draws,
    })
}

fn tail_se(s: &crate::posterior::PosteriorSummary) -> f64 {
    if s.exact || s.inside_mass <= 0.0 {
        return 0.0;
    }
    // delta method on (1 - m) / m with a binomial SE at the effective size
    let m = s.inside_mass;
    (m * (1.0 - m) / s.ess.max(1.0)).sqrt() / (m * m)
}

/// Run `reps` replications in parallel. Replication `r` draws its data,
/// chain and oracle randomness from streams indexed by `r`, so the result
/// does not depend on the thread count.
pub fn run_replications(
    cfg: &ExperimentConfig,
    sc: &Scenario,
    profile: Option<&ConditionProfile>,
    rd: f64,
    reps: usize,
) -> Vec<RepOutcome> {
    (0..reps)
        .into_par_iter()
        .map(|rep| RepOutcome {
            rep,
            result: replicate(cfg, sc, profile, rd, rep).map_err(|e| e.to_string()),
        })
        .collect()
}

/// Order statistics of a metric over successful replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// `None` when no finite values are present.
pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    let (q25, q75) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75));
    Some(Aggregate {
        count: v.len(),
        median: quantile_sorted(&v, 0.5),
        q25,
        q75,
        iqr: q75 - q25,
        mean,
        se: (var / k).sqrt(),
    })
}

pub const METRIC_NAMES: [&str; 5] = ["mean_disc", "cov_disc_op", "cov_disc_tr", "mgf_disc", "prob_disc"];

pub fn metric_values(r: &BvmReport) -> [f64; 5] {
    [r.mean_disc, r.cov_disc_op, r.cov_disc_tr, r.mgf_disc, r.prob_disc]
}

/// Aggregates keyed by metric name; empty when no replication succeeded.
pub fn aggregate_metrics(outcomes: &[RepOutcome]) -> BTreeMap<String, Aggregate> {
    let ok: Vec<&Replication> = outcomes.iter().filter_map(|o| o.result.as_ref().ok()).collect();
    let mut out = BTreeMap::new();
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let vals: Vec<f64> = ok.iter().map(|r| metric_values(&r.bvm)[k]).collect();
        if let Some(a) = aggregate(&vals) {
            out.insert(name.to_string(), a);
        }
    }
    out
}

/// Medians of the error budget entries over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub replications: usize,
    pub rd: f64,
    pub err_ub: f64,
    pub err_lb: f64,
    pub spread: f64,
    pub nu_r0: f64,
    pub rho_r0: f64,
    pub log_det_correction: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub delta_oplus: f64,
    pub q: f64,
    pub spread_ratio: f64,
}

pub fn summarize_budgets(outcomes: &[RepOutcome]) -> Option<BudgetSummary> {
    let b: Vec<ErrorBudget> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().and_then(|r| r.bvm.budget))
        .collect();
    if b.is_empty() {
        return None;
    }
    let med = |f: fn(&ErrorBudget) -> f64| {
        let vals: Vec<f64> = b.iter().map(f).collect();
        aggregate(&vals).map_or(f64::NAN, |a| a.median)
    };
    Some(BudgetSummary {
        replications: b.len(),
        rd: b[0].rd,
        err_ub: med(|x| x.err_ub),
        err_lb: med(|x| x.err_lb),
        spread: med(|x| x.spread),
        nu_r0: med(|x| x.nu_r0),
        rho_r0: med(|x| x.rho_r0),
        log_det_correction: b[0].log_det_correction,
        delta_plus: med(|x| x.delta_plus),
        delta_minus: med(|x| x.delta_minus),
        delta_oplus: med(|x| x.delta_oplus),
        q: med(|x| x.q),
        spread_ratio: med(|x| x.spread_ratio),
    })
}

/// Coverage Monte Carlo for the configured set kind; replication `r` shares
/// its data stream with metric replication `r`.
pub fn run_coverage(cfg: &ExperimentConfig, sc: &Scenario) -> Result<Option<CoverageResult>> {
    let Some(c) = &cfg.coverage else {
        return Ok(None);
    };
    let scenario = CoverageScenario {
        label: cfg.scenario.clone(),
        model: &sc.model,
        truth: &sc.truth,
        prior: &sc.prior,
        geom: &sc.geom,
        mode: cfg.posterior.posterior_mode(),
        kind: c.kind,
    };
    coverage_mc(&scenario, c.alpha, c.reps, RngStream::new(cfg.seed, 0)).map(Some)
}

/// Coverage rate over the metric replications, for sweep rows.
pub fn replication_coverage(outcomes: &[RepOutcome]) -> Option<f64> {
    let flags: Vec<bool> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().and_then(|r| r.covered))
        .collect();
    if flags.is_empty() {
        return None;
    }
    Some(flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
}
