//! Declarative experiments: configuration, replication orchestration, the
//! critical-dimension and Gaussian-prior sweeps, and report emission.
//!
//! All randomness derives from the configured seed through fixed stream
//! tags, and replication results are reduced in replication order, so
//! reports are byte-identical for any thread count.

pub mod config;
pub mod report;
pub mod run;

use std::collections::BTreeMap;

pub use config::{ExperimentConfig, PriorSpec, RdSource, SCHEMA_VERSION};
pub use report::{
    AuditReport, Check, PairedDelta, PriorSweepReport, PriorSweepRow, RunReport, SweepReport, SweepRow, TrendCheck,
    EXIT_ERROR, EXIT_FLAGGED, EXIT_OK,
};
pub use run::{aggregate, Aggregate, RepOutcome, Replication};

use crate::audit::{ConditionProfile, CONDITION_CAP};
use crate::error::{invalid, Result};
use report::{trend_check, GeometrySummary, RunFlags};
use run::{
    aggregate_metrics, build_scenario, choose_rd, replication_coverage, run_audit, run_coverage, run_replications,
    summarize_budgets, RdChoice, Scenario, METRIC_NAMES,
};

/// Minimum replications per sweep row.
pub const MIN_SWEEP_REPS: usize = 5;

fn condition_checks(prof: &ConditionProfile) -> Vec<Check> {
    let ed0 = &prof.ed0;
    vec![
        Check::new("delta(r0) <= 1/2", prof.delta.profile.at_last(), CONDITION_CAP, Some(!prof.delta.violated)),
        Check::new("omega(r0) <= 1/2", prof.omega.profile.at_last(), CONDITION_CAP, Some(!prof.omega.violated)),
        Check::new("nu0 <= cap", ed0.nu0, prof.options.nu0_cap, Some(ed0.pass)),
        Check::new(
            "b(r0) > 0",
            prof.b.profile.at_last(),
            0.0,
            Some(!prof.b.identification_failure),
        ),
        Check::new("rd <= 1/2", prof.rd.rd, CONDITION_CAP, Some(prof.rd.applicable)),
    ]
}

fn median_of(outcomes: &[RepOutcome], f: impl Fn(&Replication) -> Option<f64>) -> f64 {
    let v: Vec<f64> = outcomes.iter().filter_map(|o| o.result.as_ref().ok().and_then(&f)).collect();
    aggregate(&v).map_or(f64::NAN, |a| a.median)
}

fn all_ok(outcomes: &[RepOutcome], f: impl Fn(&Replication) -> Option<bool>) -> Option<bool> {
    let v: Vec<bool> = outcomes.iter().filter_map(|o| o.result.as_ref().ok().and_then(&f)).collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().all(|&b| b))
    }
}

fn run_checks(
    sc: &Scenario,
    rd: &RdChoice,
    profile: Option<&ConditionProfile>,
    bvm: &BTreeMap<String, Aggregate>,
    outcomes: &[RepOutcome],
    coverage: Option<&crate::credible::CoverageResult>,
) -> Vec<Check> {
    let mut checks = profile.map(condition_checks).unwrap_or_default();
    if profile.is_none() {
        checks.push(Check::new("rd <= 1/2", rd.value, CONDITION_CAP, Some(rd.applicable)));
    }
    let q = median_of(outcomes, |r| Some(r.bvm.q));
    let p = sc.geom.p as f64;
    for (name, scale) in [
        ("mean_disc", q),
        ("cov_disc_op", q),
        ("cov_disc_tr", q),
        ("mgf_disc", q),
        ("prob_disc", q.sqrt()),
    ] {
        if let Some(a) = bvm.get(name) {
            let label = if name == "prob_disc" { "prob_disc <= C rd sqrt(q)" } else { "" };
            let label = if label.is_empty() { format!("{name} <= C rd q") } else { label.to_string() };
            checks.push(Check::new(label, a.median, rd.value * scale, None));
        }
    }
    if outcomes.iter().any(|o| o.result.as_ref().is_ok_and(|r| r.bracket.is_some())) {
        let err_ub = median_of(outcomes, |r| r.bracket.map(|b| b.err_ub));
        let err_lb = median_of(outcomes, |r| r.bracket.map(|b| b.err_lb));
        let spread = median_of(outcomes, |r| r.bvm.budget.map(|b| b.spread));
        checks.push(Check::new("err_ub <= C rd p", err_ub, rd.value * p, None));
        checks.push(Check::new("err_lb <= C rd p", err_lb, rd.value * p, None));
        checks.push(Check::new("spread <= C rd q", spread, rd.value * q, None));
    }
    let tail_measured = median_of(outcomes, |r| r.tail.map(|t| t.measured));
    let tail_bound = median_of(outcomes, |r| r.tail.map(|t| t.bound));
    if let Some(pass) = all_ok(outcomes, |r| r.tail.map(|t| t.pass)) {
        checks.push(Check::new("posterior tail rho(r0) <= bound", tail_measured, tail_bound, Some(pass)));
    }
    let probe_names: Vec<String> = outcomes
        .iter()
        .find_map(|o| o.result.as_ref().ok())
        .map(|r| r.probes.iter().map(|p| p.label.clone()).collect())
        .unwrap_or_default();
    for (k, label) in probe_names.iter().enumerate() {
        let measured = median_of(outcomes, |r| r.probes.get(k).map(|p| p.measured));
        let upper = median_of(outcomes, |r| r.probes.get(k).map(|p| p.shifted_upper));
        let pass_c = all_ok(outcomes, |r| r.probes.get(k).map(|p| p.pass_shifted));
        checks.push(Check::new(format!("P({label}) <= exp(D+) P_shifted"), measured, upper, pass_c));
        let t_upper = median_of(outcomes, |r| r.probes.get(k).map(|p| p.sandwich_upper));
        let pass_t = all_ok(outcomes, |r| r.probes.get(k).map(|p| p.pass_sandwich));
        checks.push(Check::new(format!("P({label}) within Gaussian sandwich"), measured, t_upper, pass_t));
    }
    let xs: Vec<f64> = outcomes
        .iter()
        .find_map(|o| o.result.as_ref().ok())
        .map(|r| r.shell.iter().map(|c| c.x).collect())
        .unwrap_or_default();
    for (k, x) in xs.iter().enumerate() {
        let up = median_of(outcomes, |r| r.shell.get(k).map(|c| c.upper_measured));
        let up_b = median_of(outcomes, |r| r.shell.get(k).map(|c| c.upper_bound));
        let lo = median_of(outcomes, |r| r.shell.get(k).map(|c| c.lower_measured));
        let lo_b = median_of(outcomes, |r| r.shell.get(k).map(|c| c.lower_bound));
        let pass_up = all_ok(outcomes, |r| r.shell.get(k).map(|c| c.upper_measured <= c.upper_bound));
        let pass_lo = all_ok(outcomes, |r| r.shell.get(k).map(|c| c.lower_measured <= c.lower_bound));
        checks.push(Check::new(format!("upper shell deviation, x = {x}"), up, up_b, pass_up));
        checks.push(Check::new(format!("lower shell deviation, x = {x}"), lo, lo_b, pass_lo));
    }
    if let Some(pc) = &sc.prior_check {
        checks.push(Check::new("prior smallness < threshold", pc.smallness, pc.threshold, Some(pc.pass)));
    }
    if let Some(c) = coverage {
        let pass = (c.rate - c.predicted).abs() <= 4.0 * c.binomial_se.max(1e-12);
        checks.push(Check::new(
            format!("coverage {} vs sandwich prediction", c.kind.label()),
            c.rate,
            c.predicted,
            Some(pass && c.valid),
        ));
    }
    checks
}

fn needs_audit(cfg: &ExperimentConfig) -> bool {
    cfg.bracketing.rd_source == RdSource::FromConditions
}

/// Geometry, condition audit, bracketing budget, posterior, metrics and
/// coverage for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let sc = build_scenario(cfg)?;
    let profile = run_audit(cfg, &sc)?;
    let rd = choose_rd(cfg, Some(&profile));
    let mut outcomes = run_replications(cfg, &sc, Some(&profile), rd.value, cfg.reps);
    let draws = outcomes
        .first_mut()
        .and_then(|o| o.result.as_mut().ok())
        .and_then(|r| r.draws.take());
    let bvm = aggregate_metrics(&outcomes);
    let coverage = run_coverage(cfg, &sc)?;
    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    if failed == outcomes.len() {
        let first = outcomes.iter().find_map(|o| o.result.as_ref().err()).cloned().unwrap_or_default();
        return Err(invalid(format!("every replication failed; first error: {first}")));
    }
    let flags = RunFlags {
        rd_exceeds_half: !rd.applicable,
        conditions_flagged: profile.flags.any(),
        low_precision: outcomes
            .iter()
            .any(|o| o.result.as_ref().is_ok_and(|r| r.bvm.flags.low_precision)),
        failed_replications: failed,
    };
    let checks = run_checks(&sc, &rd, Some(&profile), &bvm, &outcomes, coverage.as_ref());
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: "run".into(),
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
        config: cfg.resolved(sc.model.native_response()),
        geometry: GeometrySummary::new(&sc.geom, sc.truth.matches_model),
        conditions: Some(profile),
        rd,
        prior_check: sc.prior_check,
        budget: summarize_budgets(&outcomes),
        bvm,
        coverage,
        checks,
        exit_code: if flags.applicability() { EXIT_FLAGGED } else { EXIT_OK },
        flags,
        replications: outcomes,
        draws,
    })
}

/// Condition audit only.
pub fn audit_experiment(cfg: &ExperimentConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let sc = build_scenario(cfg)?;
    let profile = run_audit(cfg, &sc)?;
    let rd = choose_rd(cfg, Some(&profile));
    let flagged = profile.flags.any() || !rd.applicable;
    Ok(AuditReport {
        schema_version: SCHEMA_VERSION,
        command: "audit".into(),
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
        config: cfg.resolved(sc.model.native_response()),
        geometry: GeometrySummary::new(&sc.geom, sc.truth.matches_model),
        checks: condition_checks(&profile),
        conditions: profile,
        rd,
        exit_code: if flagged { EXIT_FLAGGED } else { EXIT_OK },
    })
}

/// Metric replications for one configuration, as a sweep row would run
/// them. The audit runs only when `rd` comes from the conditions.
struct Cell {
    scenario: Scenario,
    profile: Option<ConditionProfile>,
    rd: RdChoice,
    outcomes: Vec<RepOutcome>,
    flagged: bool,
}

fn sweep_cell(cfg: &ExperimentConfig, reps: usize) -> Result<Cell> {
    let scenario = build_scenario(cfg)?;
    let profile = if needs_audit(cfg) { Some(run_audit(cfg, &scenario)?) } else { None };
    let rd = choose_rd(cfg, profile.as_ref());
    let outcomes = run_replications(cfg, &scenario, profile.as_ref(), rd.value, reps);
    let flagged = !rd.applicable || profile.as_ref().is_some_and(|p| p.flags.any());
    Ok(Cell {
        scenario,
        profile,
        rd,
        outcomes,
        flagged,
    })
}

/// For every target ratio, `n = round(p^3 / ratio)` with `p` taken from the
/// sweep dimensions (paired by position, or one shared value). Rows are
/// sorted by the realized ratio.
pub fn sweep_critical_dimension(cfg: &ExperimentConfig, ratios: &[f64], reps: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if ratios.is_empty() {
        return Err(invalid("ratio list is empty"));
    }
    if reps < MIN_SWEEP_REPS {
        return Err(invalid(format!("a sweep needs at least {MIN_SWEEP_REPS} replications per row")));
    }
    if ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(invalid("ratios must be positive and finite"));
    }
    let dims = &cfg.sweep.p;
    let p_for = |k: usize| -> Result<usize> {
        match dims.len() {
            0 => Ok(cfg.model.p),
            1 => Ok(dims[0]),
            m if m == ratios.len() => Ok(dims[k]),
            m => Err(invalid(format!("sweep.p has {m} entries for {} ratios", ratios.len()))),
        }
    };
    let mut rows = Vec::with_capacity(ratios.len());
    for (k, &target) in ratios.iter().enumerate() {
        let p = p_for(k)?;
        let n = ((p as f64).powi(3) / target).round().max(1.0) as usize;
        let ratio = (p as f64).powi(3) / n as f64;
        let mut row = SweepRow {
            target_ratio: target,
            n,
            p,
            ratio,
            rd: None,
            flagged: true,
            error: None,
            metrics: BTreeMap::new(),
            coverage_rate: None,
            replications: Vec::new(),
        };
        // fewer observations than parameters leaves the model unidentified
        if n <= p {
            row.error = Some(format!("n = {n} is too small for p = {p}"));
            rows.push(row);
            continue;
        }
        match cfg.with_dims(n, p).and_then(|c| sweep_cell(&c, reps)) {
            Ok(cell) => {
                let failed = cell.outcomes.iter().any(|o| o.result.is_err());
                row.rd = Some(cell.rd);
                row.flagged = cell.flagged || failed;
                row.metrics = aggregate_metrics(&cell.outcomes);
                row.coverage_rate = replication_coverage(&cell.outcomes);
                row.replications = cell.outcomes;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let trends = METRIC_NAMES.iter().map(|m| trend_check(m, &rows)).collect();
    let flagged = rows.iter().any(|r| r.flagged);
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        command: "sweep-critical".into(),
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
        config: cfg.resolved(build_scenario(cfg)?.model.native_response()),
        reps,
        rows,
        trends,
        exit_code: if flagged { EXIT_FLAGGED } else { EXIT_OK },
    })
}

/// Axis of the prior sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorAxis {
    /// Isotropic scale: `G^2 = g^2 I`.
    Scale,
    /// `G^2 = s D0^2 / p`, so that `|D0^-1 G^2 D0^-1| p = s`.
    Smallness,
}

fn paired_deltas(flat: &[RepOutcome], prior: &[RepOutcome]) -> BTreeMap<String, PairedDelta> {
    let f = aggregate_metrics(flat);
    let g = aggregate_metrics(prior);
    METRIC_NAMES
        .iter()
        .filter_map(|m| {
            let (a, b) = (f.get(*m)?, g.get(*m)?);
            let noise = (a.se * a.se + b.se * b.se).sqrt();
            let delta = b.mean - a.mean;
            Some((
                m.to_string(),
                PairedDelta {
                    flat_mean: a.mean,
                    prior_mean: b.mean,
                    flat_median: a.median,
                    prior_median: b.median,
                    delta,
                    noise,
                    z: if noise > 0.0 { delta.abs() / noise } else if delta == 0.0 { 0.0 } else { f64::INFINITY },
                },
            ))
        })
        .collect()
}

/// Paired flat and Gaussian-prior runs on identical data and chain streams.
pub fn sweep_gaussian_prior(cfg: &ExperimentConfig, axis: PriorAxis, values: &[f64], reps: usize) -> Result<PriorSweepReport> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(invalid("prior sweep needs at least one value"));
    }
    let flat_cfg = cfg.with_prior(PriorSpec::Flat)?;
    let base = sweep_cell(&flat_cfg, reps)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let spec = match axis {
            PriorAxis::Scale => PriorSpec::Gaussian { g: Some(v), smallness: None },
            PriorAxis::Smallness => PriorSpec::Gaussian { g: None, smallness: Some(v) },
        };
        let mut row = PriorSweepRow {
            g: (axis == PriorAxis::Scale).then_some(v),
            smallness_target: (axis == PriorAxis::Smallness).then_some(v),
            prior_check: None,
            error: None,
            metrics: BTreeMap::new(),
            deltas: BTreeMap::new(),
            replications: Vec::new(),
        };
        let attempt = cfg.with_prior(spec).and_then(|c| {
            let sc = build_scenario(&c)?;
            // the conditions do not involve the prior, so both arms share rd
            Ok((run_replications(&c, &sc, base.profile.as_ref(), base.rd.value, reps), sc.prior_check))
        });
        match attempt {
            Ok((outcomes, check)) => {
                row.prior_check = check;
                row.metrics = aggregate_metrics(&outcomes);
                row.deltas = paired_deltas(&base.outcomes, &outcomes);
                row.replications = outcomes;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(PriorSweepReport {
        schema_version: SCHEMA_VERSION,
        command: "sweep-prior".into(),
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
        config: cfg.resolved(base.scenario.model.native_response()),
        reps,
        rd: base.rd,
        baseline: aggregate_metrics(&base.outcomes),
        baseline_replications: base.outcomes,
        rows,
        exit_code: if base.flagged { EXIT_FLAGGED } else { EXIT_OK },
    })
}
