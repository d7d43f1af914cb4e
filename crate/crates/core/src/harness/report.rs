//! Report types and their JSON, CSV and plain-text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{metric_values, Aggregate, BudgetSummary, RdChoice, RepOutcome, METRIC_NAMES};
use crate::audit::{ConditionProfile, GaussianPriorCheck};
use crate::credible::CoverageResult;
use crate::error::{BvmError, Result};
use crate::geometry::LocalGeometry;
use crate::linalg::{Matrix, Vector};
use crate::posterior::{dump_draws, PosteriorSample};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FLAGGED: i32 = 2;

/// One inequality checked against its budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub budget: f64,
    /// `measured / budget`.
    pub ratio: f64,
    /// `None` when the bound carries an unspecified constant and only the
    /// ratio is meaningful.
    pub pass: Option<bool>,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, budget: f64, pass: Option<bool>) -> Self {
        Self {
            name: name.into(),
            measured,
            budget,
            ratio: measured / budget,
            pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub n: usize,
    pub p: usize,
    pub theta_star: Vector,
    pub d0_sq: Matrix,
    pub v0_sq: Matrix,
    pub a_sq: f64,
    pub r0: f64,
    pub x_n: f64,
    pub q_star: f64,
    pub matches_model: bool,
    pub theta_star_on_boundary: bool,
}

impl GeometrySummary {
    pub fn new(g: &LocalGeometry, matches_model: bool) -> Self {
        Self {
            n: g.n,
            p: g.p,
            theta_star: g.theta_star.clone(),
            d0_sq: g.d0_sq.clone(),
            v0_sq: g.v0_sq.clone(),
            a_sq: g.a_sq,
            r0: g.r0,
            x_n: g.x_n,
            q_star: g.q_star,
            matches_model,
            theta_star_on_boundary: g.theta_star_on_boundary,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFlags {
    pub rd_exceeds_half: bool,
    pub conditions_flagged: bool,
    pub low_precision: bool,
    pub failed_replications: usize,
}

impl RunFlags {
    pub fn applicability(&self) -> bool {
        self.rd_exceeds_half || self.conditions_flagged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub scenario: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub geometry: GeometrySummary,
    pub conditions: Option<ConditionProfile>,
    pub rd: RdChoice,
    pub prior_check: Option<GaussianPriorCheck>,
    pub budget: Option<BudgetSummary>,
    pub bvm: BTreeMap<String, Aggregate>,
    pub coverage: Option<CoverageResult>,
    pub checks: Vec<Check>,
    pub flags: RunFlags,
    pub exit_code: i32,
    pub replications: Vec<RepOutcome>,
    #[serde(skip)]
    pub draws: Option<PosteriorSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub command: String,
    pub scenario: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub geometry: GeometrySummary,
    pub conditions: ConditionProfile,
    pub rd: RdChoice,
    pub checks: Vec<Check>,
    pub exit_code: i32,
}

/// One row of the critical-dimension sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_ratio: f64,
    pub n: usize,
    pub p: usize,
    /// Realized `p^3 / n`.
    pub ratio: f64,
    pub rd: Option<RdChoice>,
    /// Set when the row could not run or some replications failed.
    pub flagged: bool,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, Aggregate>,
    pub coverage_rate: Option<f64>,
    pub replications: Vec<RepOutcome>,
}

/// Adjacent-trend summary of one metric's medians across sweep rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub metric: String,
    pub medians: Vec<f64>,
    pub inversions: usize,
    /// At most one adjacent decrease.
    pub nondecreasing: bool,
    /// First row below half of the last.
    pub first_below_half_last: bool,
}

pub fn trend_check(metric: &str, rows: &[SweepRow]) -> TrendCheck {
    let medians: Vec<f64> = rows
        .iter()
        .map(|r| r.metrics.get(metric).map_or(f64::NAN, |a| a.median))
        .collect();
    let inversions = medians.windows(2).filter(|w| !(w[1] >= w[0])).count();
    let first_below_half_last = match (medians.first(), medians.last()) {
        (Some(&a), Some(&b)) if medians.len() > 1 => a < 0.5 * b,
        _ => false,
    };
    TrendCheck {
        metric: metric.into(),
        medians,
        inversions,
        nondecreasing: inversions <= 1,
        first_below_half_last,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub command: String,
    pub scenario: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub reps: usize,
    /// Sorted by `ratio` ascending.
    pub rows: Vec<SweepRow>,
    pub trends: Vec<TrendCheck>,
    pub exit_code: i32,
}

/// Paired difference of one metric between the Gaussian and the flat prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub flat_mean: f64,
    pub prior_mean: f64,
    pub flat_median: f64,
    pub prior_median: f64,
    /// `prior_mean - flat_mean`.
    pub delta: f64,
    /// `sqrt(se_flat^2 + se_prior^2)` of the two means.
    pub noise: f64,
    /// `|delta| / noise`.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSweepRow {
    pub g: Option<f64>,
    pub smallness_target: Option<f64>,
    pub prior_check: Option<GaussianPriorCheck>,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, Aggregate>,
    pub deltas: BTreeMap<String, PairedDelta>,
    pub replications: Vec<RepOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSweepReport {
    pub schema_version: u32,
    pub command: String,
    pub scenario: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub reps: usize,
    pub rd: RdChoice,
    pub baseline: BTreeMap<String, Aggregate>,
    pub baseline_replications: Vec<RepOutcome>,
    pub rows: Vec<PriorSweepRow>,
    pub exit_code: i32,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> BvmError + '_ {
    move |e| BvmError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn prepare_dir(dir: &Path) -> Result<PathBuf> {
    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(io_err(&tables))?;
    Ok(tables)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| BvmError::Serialization(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Full-precision float formatting for CSV cells.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let wrap = |e: csv::Error| BvmError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

const REP_HEADER: [&str; 15] = [
    "rep",
    "status",
    "mean_disc",
    "cov_disc_op",
    "cov_disc_tr",
    "mgf_disc",
    "prob_disc",
    "rd",
    "q",
    "err_ub",
    "err_lb",
    "spread",
    "delta_plus",
    "inside_mass",
    "covered",
];

fn rep_row(o: &RepOutcome) -> Vec<String> {
    match &o.result {
        Ok(r) => {
            let b = r.bvm.budget;
            let mut row = vec![o.rep.to_string(), "ok".into()];
            row.extend(metric_values(&r.bvm).iter().map(|&v| num(v)));
            row.extend([
                num(r.bvm.rd),
                num(r.bvm.q),
                opt_num(b.map(|b| b.err_ub)),
                opt_num(b.map(|b| b.err_lb)),
                opt_num(b.map(|b| b.spread)),
                opt_num(b.map(|b| b.delta_plus)),
                num(r.inside_mass),
                r.covered.map_or_else(String::new, |c| c.to_string()),
            ]);
            row
        }
        Err(_) => {
            let mut row = vec![o.rep.to_string(), "failed".into()];
            row.extend(std::iter::repeat_n(String::new(), REP_HEADER.len() - 2));
            row
        }
    }
}

fn coverage_csv(path: &Path, c: &CoverageResult) -> Result<()> {
    write_csv(
        path,
        &["scenario", "kind", "alpha", "n_reps", "rate", "se", "predicted"],
        &[vec![
            c.scenario.clone(),
            c.kind.label().into(),
            num(c.alpha),
            c.n_reps.to_string(),
            num(c.rate),
            num(c.binomial_se),
            num(c.predicted),
        ]],
    )
}

fn render_checks(out: &mut String, checks: &[Check]) {
    let _ = writeln!(out, "{:<52} {:>13} {:>13} {:>11}  status", "check", "measured", "budget", "ratio");
    for c in checks {
        let status = match c.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "ratio",
        };
        let _ = writeln!(
            out,
            "{:<52} {:>13.6e} {:>13.6e} {:>11.4e}  {status}",
            c.name, c.measured, c.budget, c.ratio
        );
    }
}

fn header(out: &mut String, command: &str, cfg: &ExperimentConfig) {
    let _ = writeln!(out, "{command}: {}", cfg.scenario);
    let _ = writeln!(
        out,
        "family {:?}, n = {}, p = {}, seed = {}, reps = {}",
        cfg.model.family, cfg.model.n, cfg.model.p, cfg.seed, cfg.reps
    );
}

impl RunReport {
    /// Write `report.json`, `tables/*.csv`, `summary.txt` and, when draws
    /// were kept, `draws/rep0.bin` with its sidecar.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        let tables = prepare_dir(dir)?;
        write_json(self, &dir.join("report.json"))?;
        let rows: Vec<Vec<String>> = self.replications.iter().map(rep_row).collect();
        write_csv(&tables.join("replications.csv"), &REP_HEADER, &rows)?;
        if let Some(c) = &self.conditions {
            crate::audit::write_profile_csv(c, &tables.join("profile.csv"))?;
        }
        if let Some(c) = &self.coverage {
            coverage_csv(&tables.join("coverage.csv"), c)?;
        }
        write_csv(
            &tables.join("checks.csv"),
            &["name", "measured", "budget", "ratio", "pass"],
            &self
                .checks
                .iter()
                .map(|c| {
                    vec![
                        c.name.clone(),
                        num(c.measured),
                        num(c.budget),
                        num(c.ratio),
                        c.pass.map_or_else(String::new, |p| p.to_string()),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
        if let Some(d) = &self.draws {
            let draws = dir.join("draws");
            std::fs::create_dir_all(&draws).map_err(io_err(&draws))?;
            dump_draws(d, &draws.join("rep0.bin"))?;
        }
        let mut s = String::new();
        header(&mut s, &self.command, &self.config);
        let _ = writeln!(
            s,
            "rd = {:.6e} ({:?}), r0 = {:.6}, a^2 = {:.6}, exit code {}",
            self.rd.value, self.rd.source, self.geometry.r0, self.geometry.a_sq, self.exit_code
        );
        if self.flags.failed_replications > 0 {
            let _ = writeln!(s, "failed replications: {}", self.flags.failed_replications);
        }
        s.push('\n');
        render_checks(&mut s, &self.checks);
        write_text(&s, &dir.join("summary.txt"))
    }
}

impl AuditReport {
    pub fn emit(&self, dir: &Path) -> Result<()> {
        let tables = prepare_dir(dir)?;
        write_json(self, &dir.join("report.json"))?;
        crate::audit::write_profile_csv(&self.conditions, &tables.join("profile.csv"))?;
        let mut s = String::new();
        header(&mut s, &self.command, &self.config);
        let _ = writeln!(s, "rd = {:.6e}, exit code {}\n", self.rd.value, self.exit_code);
        render_checks(&mut s, &self.checks);
        write_text(&s, &dir.join("summary.txt"))
    }
}

impl SweepReport {
    pub fn emit(&self, dir: &Path) -> Result<()> {
        let tables = prepare_dir(dir)?;
        write_json(self, &dir.join("report.json"))?;
        let mut head = vec!["target_ratio", "n", "p", "ratio", "rd", "flagged", "coverage_rate"];
        let metric_cols: Vec<String> = METRIC_NAMES
            .iter()
            .flat_map(|m| [format!("{m}_median"), format!("{m}_iqr")])
            .collect();
        head.extend(metric_cols.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    num(r.target_ratio),
                    r.n.to_string(),
                    r.p.to_string(),
                    num(r.ratio),
                    opt_num(r.rd.map(|d| d.value)),
                    r.flagged.to_string(),
                    opt_num(r.coverage_rate),
                ];
                for m in METRIC_NAMES {
                    let a = r.metrics.get(m);
                    row.push(opt_num(a.map(|a| a.median)));
                    row.push(opt_num(a.map(|a| a.iqr)));
                }
                row
            })
            .collect();
        write_csv(&tables.join("sweep.csv"), &head, &rows)?;
        let mut rep_head = vec!["target_ratio"];
        rep_head.extend(REP_HEADER);
        let rep_rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .flat_map(|r| {
                r.replications.iter().map(move |o| {
                    let mut row = vec![num(r.target_ratio)];
                    row.extend(rep_row(o));
                    row
                })
            })
            .collect();
        write_csv(&tables.join("replications.csv"), &rep_head, &rep_rows)?;
        let mut s = String::new();
        header(&mut s, &self.command, &self.config);
        let _ = writeln!(s, "replications per row: {}, exit code {}\n", self.reps, self.exit_code);
        let _ = writeln!(s, "{:>10} {:>7} {:>4} {:>12} {:>13} {:>13}", "ratio", "n", "p", "rd", "mean_disc", "cov_disc_op");
        for r in &self.rows {
            let med = |m: &str| r.metrics.get(m).map_or(f64::NAN, |a| a.median);
            let _ = writeln!(
                s,
                "{:>10.4} {:>7} {:>4} {:>12.4e} {:>13.6e} {:>13.6e}{}",
                r.ratio,
                r.n,
                r.p,
                r.rd.map_or(f64::NAN, |d| d.value),
                med("mean_disc"),
                med("cov_disc_op"),
                if r.flagged { "  flagged" } else { "" }
            );
        }
        s.push('\n');
        for t in &self.trends {
            let _ = writeln!(
                s,
                "trend {:<12} inversions {}  nondecreasing {}  first < last/2 {}",
                t.metric, t.inversions, t.nondecreasing, t.first_below_half_last
            );
        }
        write_text(&s, &dir.join("summary.txt"))
    }
}

impl PriorSweepReport {
    pub fn emit(&self, dir: &Path) -> Result<()> {
        let tables = prepare_dir(dir)?;
        write_json(self, &dir.join("report.json"))?;
        let mut head = vec!["g", "smallness_target", "smallness", "prior_pass"];
        let cols: Vec<String> = METRIC_NAMES
            .iter()
            .flat_map(|m| [format!("{m}_flat"), format!("{m}_prior"), format!("{m}_delta"), format!("{m}_noise")])
            .collect();
        head.extend(cols.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    opt_num(r.g),
                    opt_num(r.smallness_target),
                    opt_num(r.prior_check.map(|c| c.smallness)),
                    r.prior_check.map_or_else(String::new, |c| c.pass.to_string()),
                ];
                for m in METRIC_NAMES {
                    let d = r.deltas.get(m);
                    row.push(opt_num(d.map(|d| d.flat_mean)));
                    row.push(opt_num(d.map(|d| d.prior_mean)));
                    row.push(opt_num(d.map(|d| d.delta)));
                    row.push(opt_num(d.map(|d| d.noise)));
                }
                row
            })
            .collect();
        write_csv(&tables.join("prior_sweep.csv"), &head, &rows)?;
        let mut rep_rows: Vec<Vec<String>> = self
            .baseline_replications
            .iter()
            .map(|o| {
                let mut row = vec!["flat".to_string()];
                row.extend(rep_row(o));
                row
            })
            .collect();
        for r in &self.rows {
            let label = match (r.g, r.smallness_target) {
                (Some(g), _) => format!("g={g:?}"),
                (None, Some(s)) => format!("smallness={s:?}"),
                _ => String::new(),
            };
            rep_rows.extend(r.replications.iter().map(|o| {
                let mut row = vec![label.clone()];
                row.extend(rep_row(o));
                row
            }));
        }
        let mut rep_head = vec!["prior"];
        rep_head.extend(REP_HEADER);
        write_csv(&tables.join("replications.csv"), &rep_head, &rep_rows)?;
        let mut s = String::new();
        header(&mut s, &self.command, &self.config);
        let _ = writeln!(s, "replications per arm: {}, exit code {}\n", self.reps, self.exit_code);
        for r in &self.rows {
            let label = match (r.g, r.smallness_target) {
                (Some(g), _) => format!("g = {g}"),
                (None, Some(v)) => format!("smallness = {v}"),
                _ => String::new(),
            };
            let check = r
                .prior_check
                .map_or("n/a".to_string(), |c| format!("{:.4e} ({})", c.smallness, if c.pass { "pass" } else { "FAIL" }));
            let _ = writeln!(s, "{label}: prior smallness {check}");
            if let Some(e) = &r.error {
                let _ = writeln!(s, "  error: {e}");
            }
            for (m, d) in &r.deltas {
                let _ = writeln!(
                    s,
                    "  {m:<12} flat {:>12.5e} prior {:>12.5e} delta {:>12.5e} noise {:>11.4e} z {:>9.3}",
                    d.flat_mean, d.prior_mean, d.delta, d.noise, d.z
                );
            }
        }
        write_text(&s, &dir.join("summary.txt"))
    }
}
