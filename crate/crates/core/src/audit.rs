//! Numerical audit of the local and global regularity conditions: the
//! quadratic-approximation profile `delta(r)`, the gradient-increment scale
//! `omega(r)`, the exponential-moment constant `nu0`, the moment range
//! `g(r)`, the identification strength `b(r)`, and the resulting bracketing
//! constant.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BvmError, Result};
use crate::geometry::LocalGeometry;
use crate::linalg::{spd_inv_sqrt, sym_op_norm, symmetrize, Matrix, Vector};
use crate::model::{self, sample_dataset, QuasiModel, TrueProcess};
use crate::prior::Prior;
use crate::rng::RngStream;
use crate::sampling::{unit_directions, ShellPlan, DEFAULT_RADII, POLISH_STEPS};

pub const MIN_MC_BUDGET: usize = 1000;
/// Caps on the condition constants.
pub const CONDITION_CAP: f64 = 0.5;
pub const DEFAULT_NU0_CAP: f64 = 4.0;
/// Default smallness threshold for prior checks.
pub const DEFAULT_PRIOR_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditOptions {
    /// Replicated datasets behind every exponential-moment estimate.
    pub mc_budget: usize,
    /// Moment range; defaults to `sqrt(p + x_n)`.
    pub g_max: Option<f64>,
    pub lambda_points: usize,
    pub nu0_cap: f64,
    /// Directions `gamma` for the score at `theta*`.
    pub mgf_directions: usize,
    /// Directions `gamma` for gradient increments.
    pub increment_directions: usize,
    /// Points `theta` per radius for gradient increments.
    pub theta_directions: usize,
    pub radii: usize,
    /// Directions for the deterministic shell scans; defaults to `128 p`
    /// capped at 4096.
    pub shell_directions: Option<usize>,
    pub polish_steps: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            mc_budget: 2000,
            g_max: None,
            lambda_points: 21,
            nu0_cap: DEFAULT_NU0_CAP,
            mgf_directions: 64,
            increment_directions: 16,
            theta_directions: 8,
            radii: DEFAULT_RADII,
            shell_directions: None,
            polish_steps: POLISH_STEPS,
        }
    }
}

impl AuditOptions {
    pub fn g_max(&self, geom: &LocalGeometry) -> f64 {
        self.g_max.unwrap_or_else(|| (geom.p as f64 + geom.x_n).sqrt())
    }

    pub fn shell_plan(&self, geom: &LocalGeometry, r_max: f64) -> ShellPlan {
        let dirs = self
            .shell_directions
            .unwrap_or_else(|| ShellPlan::default_direction_count(geom.p));
        let mut plan = ShellPlan::with_sizes(geom.p, r_max, dirs, self.radii);
        plan.polish_steps = self.polish_steps;
        plan
    }

    /// Symmetric grid of `lambda_points` values on `[-g, g]`, zero removed.
    pub fn lambda_grid(&self, g: f64) -> Vec<f64> {
        let k = self.lambda_points.max(3);
        (0..k)
            .map(|i| -g + 2.0 * g * i as f64 / (k - 1) as f64)
            .filter(|l| l.abs() > 1e-12 * g)
            .collect()
    }
}

/// A function sampled on a radius grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledFunction {
    pub r: Vec<f64>,
    pub value: Vec<f64>,
    pub se: Vec<f64>,
}

impl SampledFunction {
    pub fn at_last(&self) -> f64 {
        self.value.last().copied().unwrap_or(f64::NAN)
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.value.windows(2).all(|w| w[1] >= w[0])
    }
}

/// `r0 * k / radii`, `k = 1..=radii`.
pub fn default_r_grid(geom: &LocalGeometry, radii: usize) -> Vec<f64> {
    (1..=radii).map(|k| geom.r0 * k as f64 / radii as f64).collect()
}

fn check_grid(r_grid: &[f64]) -> Result<()> {
    if r_grid.is_empty() || r_grid.iter().any(|&r| !(r > 0.0)) || r_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("radius grid must be nonempty, positive and increasing"));
    }
    Ok(())
}

/// `-2 E L(theta, theta*) / |D0 (theta - theta*)|^2` at standardized offset
/// `u`, or `None` outside the domain.
fn curvature_ratio(model: &dyn QuasiModel, truth: &TrueProcess, geom: &LocalGeometry, u: &Vector) -> Result<Option<f64>> {
    let theta = geom.from_standardized(u);
    if !model.domain().contains(&theta) {
        return Ok(None);
    }
    let gap = model::expected_loglik_ratio(model, truth, geom.n, &theta, &geom.theta_star)?;
    Ok(Some(-2.0 * gap / u.norm_squared()))
}

/// Improve `objective(direction)` on the unit sphere by projected
/// finite-difference ascent. Returns the best value found.
pub(crate) fn polish_on_sphere(
    start: &Vector,
    start_value: f64,
    steps: usize,
    objective: impl Fn(&Vector) -> Result<Option<f64>>,
) -> Result<f64> {
    let p = start.len();
    if p < 2 || steps == 0 {
        return Ok(start_value);
    }
    let mut dir = start.clone();
    let mut best = start_value;
    let mut eta = 0.1;
    let h = 1e-4;
    for _ in 0..steps {
        let mut grad = Vector::zeros(p);
        for j in 0..p {
            let mut plus = dir.clone();
            plus[j] += h;
            let mut minus = dir.clone();
            minus[j] -= h;
            if let (Some(a), Some(b)) = (objective(&plus.normalize())?, objective(&minus.normalize())?) {
                grad[j] = (a - b) / (2.0 * h);
            }
        }
        // tangent projection
        grad -= &dir * dir.dot(&grad);
        let gn = grad.norm();
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        let mut improved = false;
        while eta > 1e-6 {
            let trial = (&dir + &grad * (eta / gn)).normalize();
            if let Some(v) = objective(&trial)? {
                if v > best {
                    best = v;
                    dir = trial;
                    improved = true;
                    break;
                }
            }
            eta *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(best)
}

/// Curvature ratios on every `(radius, direction)` pair of the plan.
struct ShellScan {
    radii: Vec<f64>,
    directions: Vec<Vector>,
    /// `[radius][direction]`.
    ratio: Vec<Vec<Option<f64>>>,
    skipped: usize,
}

fn shell_scan(model: &dyn QuasiModel, truth: &TrueProcess, geom: &LocalGeometry, radii: &[f64], plan: &ShellPlan) -> Result<ShellScan> {
    if plan.directions.is_empty() {
        return Err(invalid("sample plan has no directions"));
    }
    let ratio: Vec<Vec<Option<f64>>> = radii
        .par_iter()
        .map(|&r| {
            plan.directions
                .iter()
                .map(|d| curvature_ratio(model, truth, geom, &(d * r)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let skipped = ratio.iter().flatten().filter(|v| v.is_none()).count();
    Ok(ShellScan {
        radii: radii.to_vec(),
        directions: plan.directions.clone(),
        ratio,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaProfile {
    pub profile: SampledFunction,
    /// `delta` exceeds the cap at the last grid radius.
    pub violated: bool,
    pub skipped_points: usize,
}

/// `delta(r) = sup_{|D0 (theta - theta*)| <= r} |-2 E L(theta, theta*) / |D0 (theta - theta*)|^2 - 1|`.
pub fn estimate_delta_of_r(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    geom: &LocalGeometry,
    r_grid: &[f64],
    plan: &ShellPlan,
) -> Result<DeltaProfile> {
    check_grid(r_grid)?;
    let scan = shell_scan(model, truth, geom, r_grid, plan)?;
    let mut value = Vec::with_capacity(r_grid.len());
    let mut running = 0.0f64;
    for (k, &r) in scan.radii.iter().enumerate() {
        let (mut worst, mut arg) = (0.0f64, None);
        for (j, v) in scan.ratio[k].iter().enumerate() {
            if let Some(v) = v {
                let dev = (v - 1.0).abs();
                if dev > worst || arg.is_none() {
                    worst = dev;
                    arg = Some(j);
                }
            }
        }
        if let Some(j) = arg {
            worst = polish_on_sphere(&scan.directions[j], worst, plan.polish_steps, |d| {
                Ok(curvature_ratio(model, truth, geom, &(d * r))?.map(|v| (v - 1.0).abs()))
            })?;
        }
        running = running.max(worst);
        value.push(running);
    }
    let violated = value.last().is_some_and(|&d| d > CONDITION_CAP);
    Ok(DeltaProfile {
        profile: SampledFunction {
            r: r_grid.to_vec(),
            se: vec![0.0; value.len()],
            value,
        },
        violated,
        skipped_points: scan.skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BProfile {
    pub profile: SampledFunction,
    /// `b` at the last grid radius is not positive.
    pub identification_failure: bool,
    /// `r b(r)` is nondecreasing on the grid.
    pub rb_monotone: bool,
    pub skipped_points: usize,
}

/// `b(r) = inf_{|D0 (theta - theta*)| = r} |E L(theta, theta*)| / r^2`.
pub fn estimate_b_of_r(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    geom: &LocalGeometry,
    r_grid: &[f64],
    plan: &ShellPlan,
) -> Result<BProfile> {
    check_grid(r_grid)?;
    let scan = shell_scan(model, truth, geom, r_grid, plan)?;
    let mut value = Vec::with_capacity(r_grid.len());
    for (k, &r) in scan.radii.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, v) in scan.ratio[k].iter().enumerate() {
            if let Some(v) = v {
                let b = v.abs() / 2.0;
                if best.is_none_or(|(cur, _)| b < cur) {
                    best = Some((b, j));
                }
            }
        }
        let b = match best {
            Some((b, j)) => -polish_on_sphere(&scan.directions[j], -b, plan.polish_steps, |d| {
                Ok(curvature_ratio(model, truth, geom, &(d * r))?.map(|v| -v.abs() / 2.0))
            })?,
            None => f64::NAN,
        };
        value.push(b);
    }
    let rb_monotone = value
        .iter()
        .zip(r_grid)
        .map(|(b, r)| b * r)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[1] >= w[0] * (1.0 - 1e-12));
    let identification_failure = !value.last().is_some_and(|&b| b > 0.0);
    Ok(BProfile {
        profile: SampledFunction {
            r: r_grid.to_vec(),
            se: vec![0.0; value.len()],
            value,
        },
        identification_failure,
        rb_monotone,
        skipped_points: scan.skipped,
    })
}

/// Whitened stochastic scores `V0^{-1} grad zeta(theta)` over replicated
/// datasets: `[replication][point]`.
pub struct ScoreSample {
    pub points: Vec<Vector>,
    pub whitened: Vec<Vec<Vector>>,
}

pub fn simulate_scores(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    geom: &LocalGeometry,
    points: &[Vector],
    budget: usize,
    stream: RngStream,
) -> Result<ScoreSample> {
    if budget < MIN_MC_BUDGET {
        return Err(invalid(format!("Monte Carlo budget {budget} is below the minimum {MIN_MC_BUDGET}")));
    }
    let whiten = spd_inv_sqrt(&geom.v0_sq, "score covariance")?;
    let expected: Vec<Vector> = points
        .iter()
        .map(|t| model::expected_score(model, truth, geom.n, t))
        .collect::<Result<_>>()?;
    let whitened = (0..budget)
        .into_par_iter()
        .map(|r| {
            let data = sample_dataset(truth, geom.n, stream.substream(r as u64))?;
            points
                .iter()
                .zip(&expected)
                .map(|(t, e)| Ok(&whiten * (model::score(model, &data, t)? - e)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSample {
        points: points.to_vec(),
        whitened,
    })
}

/// Centered projections `e^T z_r`. The stochastic score has mean zero, so
/// centering only removes Monte Carlo noise.
fn centered(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = values.collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.into_iter().map(|x| x - m).collect()
}

/// Empirical cumulant `log mean exp(t y)` with the delta-method standard
/// error and the tilted mean `K'(t)`.
fn cumulant(y: &[f64], t: f64) -> (f64, f64, f64) {
    let m = y.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(t * v));
    if !m.is_finite() {
        return (f64::INFINITY, f64::INFINITY, f64::NAN);
    }
    let (mut s, mut s2, mut sy) = (0.0, 0.0, 0.0);
    for &v in y {
        let w = (t * v - m).exp();
        s += w;
        s2 += w * w;
        sy += w * v;
    }
    let r = y.len() as f64;
    let mean = s / r;
    let var = (s2 / r - mean * mean).max(0.0);
    (m + mean.ln(), (var / r).sqrt() / mean, sy / s)
}

/// True when the top 0.1% of `exp(t y)` terms carry more than half the sum.
fn heavy_tailed(y: &[f64], t: f64) -> bool {
    let m = y.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(t * v));
    if !m.is_finite() {
        return true;
    }
    let mut w: Vec<f64> = y.iter().map(|&v| (t * v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let k = (y.len() / 1000).max(1);
    w.sort_by(|a, b| b.total_cmp(a));
    w[..k].iter().sum::<f64>() > 0.5 * total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ed0Result {
    /// `max(1, sqrt(nu0_sq_raw))`.
    pub nu0: f64,
    /// `sup 2 log E exp(lambda gamma^T grad zeta / |V0 gamma|) / lambda^2`.
    pub nu0_sq_raw: f64,
    pub nu0_sq_se: f64,
    pub argmax_lambda: f64,
    pub g_max: f64,
    pub finite: bool,
    pub heavy_tail: bool,
    pub pass: bool,
}

fn ed0_from_sample(z_star: &[&Vector], directions: &[Vector], lambdas: &[f64], g: f64, cap: f64) -> Ed0Result {
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    let mut finite = true;
    let mut heavy = false;
    for e in directions {
        let y = centered(z_star.iter().map(|z| e.dot(z)));
        for &l in lambdas {
            let (k, se, _) = cumulant(&y, l);
            if !k.is_finite() {
                finite = false;
                continue;
            }
            let ratio = 2.0 * k / (l * l);
            if ratio > best.0 {
                best = (ratio, 2.0 * se / (l * l), l);
            }
        }
        heavy |= heavy_tailed(&y, g) || heavy_tailed(&y, -g);
    }
    let raw = best.0;
    let nu0 = raw.max(1.0).sqrt();
    finite &= raw.is_finite();
    Ed0Result {
        nu0,
        nu0_sq_raw: raw,
        nu0_sq_se: best.1,
        argmax_lambda: best.2,
        g_max: g,
        finite,
        heavy_tail: heavy,
        pass: finite && nu0 <= cap,
    }
}

/// Smallest `nu0` satisfying the exponential-moment condition for the score
/// at `theta*` over sampled directions and the `lambda` grid.
pub fn ed0_check(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    geom: &LocalGeometry,
    opts: &AuditOptions,
    stream: RngStream,
) -> Result<Ed0Result> {
    let sample = simulate_scores(model, truth, geom, &[geom.theta_star.clone()], opts.mc_budget, stream)?;
    let z: Vec<&Vector> = sample.whitened.iter().map(|row| &row[0]).collect();
    let g = opts.g_max(geom);
    let dirs = unit_directions(geom.p, opts.mgf_directions.max(1));
    Ok(ed0_from_sample(&z, &dirs, &opts.lambda_grid(g), g, opts.nu0_cap))
}

/// Largest `t >= 0` with `K(sign * t) <= level`, from a log-spaced table.
fn cumulant_inverse(table: &[(f64, f64)], level: f64) -> f64 {
    // table: (t, K(t)) for increasing t with K nondecreasing in t
    if table[0].1 > level {
        // below the table: the cumulant is locally quadratic
        let (t0, k0) = table[0];
        return if k0 > 0.0 { t0 * (level / k0).sqrt() } else { t0 };
    }
    for w in table.windows(2) {
        let ((t0, k0), (t1, k1)) = (w[0], w[1]);
        if k1 > level {
            if k0 <= 0.0 {
                return t0;
            }
            // log-log interpolation
            let s = (level.ln() - k0.ln()) / (k1.ln() - k0.ln());
            return (t0.ln() + s * (t1.ln() - t0.ln())).exp();
        }
    }
    table.last().map(|&(t, _)| t).unwrap_or(0.0)
}

const T_TABLE_POINTS: usize = 40;

/// Smallest scale `omega` with `log E exp(lambda y / omega) <= nu0^2 lambda^2 / 2`
/// on the `lambda` grid, plus its delta-method standard error.
fn increment_scale(y: &[f64], lambdas: &[f64], nu0: f64) -> (f64, f64) {
    let sd = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    let ymax = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if ymax <= 1e-13 || sd == 0.0 {
        return (0.0, 0.0);
    }
    let lmax = lambdas.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let lmin = lambdas.iter().fold(f64::INFINITY, |a, l| a.min(l.abs()));
    let t_lo = 0.01 * nu0 * lmin / sd;
    let t_hi = 100.0 * nu0 * lmax / sd;
    let mut worst = (0.0, 0.0);
    for sign in [1.0, -1.0] {
        let table: Vec<(f64, f64)> = (0..T_TABLE_POINTS)
            .map(|k| {
                let t = t_lo * (t_hi / t_lo).powf(k as f64 / (T_TABLE_POINTS - 1) as f64);
                (t, cumulant(y, sign * t).0)
            })
            .collect();
        for &l in lambdas.iter().filter(|&&l| l * sign > 0.0) {
            let level = nu0 * nu0 * l * l / 2.0;
            let t_star = cumulant_inverse(&table, level);
            let omega = l.abs() / t_star;
            if omega > worst.0 {
                let (_, se_k, slope) = cumulant(y, sign * t_star);
                let rel = (se_k / (t_star * slope.abs())).abs();
                worst = (omega, if rel.is_finite() { omega * rel } else { f64::NAN });
            }
        }
    }
    worst
}

/// Largest `lambda` on `grid` (ascending positive values) such that the
/// moment condition holds for every grid value up to it, both signs.
fn moment_range(y: &[f64], grid: &[f64], nu0: f64) -> f64 {
    let mut last = 0.0;
    for &l in grid {
        let ok = [l, -l].iter().all(|&s| cumulant(y, s).0 <= nu0 * nu0 * l * l / 2.0);
        if !ok {
            break;
        }
        last = l;
    }
    last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaProfile {
    pub profile: SampledFunction,
    /// Moment range `g(r)` of the stochastic gradient over `Theta0(r)`.
    pub g_of_r: SampledFunction,
    pub violated: bool,
    pub points: usize,
}

/// Sampled points for the increment conditions: `theta*` followed by
/// `theta_directions` points on each grid radius.
fn increment_points(geom: &LocalGeometry, r_grid: &[f64], opts: &AuditOptions) -> (Vec<Vector>, Vec<f64>) {
    let dirs = unit_directions(geom.p, opts.theta_directions.max(1));
    let mut points = vec![geom.theta_star.clone()];
    let mut radius = vec![0.0];
    for &r in r_grid {
        for d in &dirs {
            points.push(geom.from_standardized(&(d * r)));
            radius.push(r);
        }
    }
    (points, radius)
}

fn omega_from_sample(
    sample: &ScoreSample,
    radius: &[f64],
    r_grid: &[f64],
    geom: &LocalGeometry,
    opts: &AuditOptions,
    nu0: f64,
) -> OmegaProfile {
    let g = opts.g_max(geom);
    let lambdas = opts.lambda_grid(g);
    let step = 2.0 * g / (opts.lambda_points.max(3) - 1) as f64;
    let extended: Vec<f64> = (1..).map(|k| k as f64 * step).take_while(|&l| l <= 4.0 * g + 1e-12).collect();
    let dirs = unit_directions(geom.p, opts.increment_directions.max(1));
    let npts = sample.points.len();
    let per_point: Vec<(f64, f64, f64)> = (0..npts)
        .into_par_iter()
        .map(|i| {
            let mut om = (0.0f64, 0.0f64);
            let mut range = f64::INFINITY;
            for e in &dirs {
                let level = centered(sample.whitened.iter().map(|row| e.dot(&row[i])));
                range = range.min(moment_range(&level, &extended, nu0));
                if i > 0 {
                    let inc = centered(sample.whitened.iter().map(|row| e.dot(&(&row[i] - &row[0]))));
                    let (w, se) = increment_scale(&inc, &lambdas, nu0);
                    if w > om.0 {
                        om = (w, se);
                    }
                }
            }
            (om.0, om.1, range)
        })
        .collect();
    let mut value = Vec::new();
    let mut se = Vec::new();
    let mut g_val = Vec::new();
    let (mut run, mut run_se, mut run_g) = (0.0f64, 0.0f64, per_point[0].2);
    let mut idx = 1;
    for &r in r_grid {
        while idx < npts && radius[idx] <= r * (1.0 + 1e-12) {
            let (w, s, gr) = per_point[idx];
            if w > run {
                run = w;
                run_se = s;
            }
            run_g = run_g.min(gr);
            idx += 1;
        }
        value.push(run);
        se.push(run_se);
        g_val.push(run_g);
    }
    let violated = value.last().is_some_and(|&w| w > CONDITION_CAP);
    OmegaProfile {
        profile: SampledFunction {
            r: r_grid.to_vec(),
            value,
            se,
        },
        g_of_r: SampledFunction {
            r: r_grid.to_vec(),
            se: vec![0.0; g_val.len()],
            value: g_val,
        },
        violated,
        points: npts,
    }
}

/// `omega(r)`: smallest scale making the normalized gradient-increment
/// moment bound hold over sampled `theta` in `Theta0(r)`, directions and the
/// `lambda` grid. Also returns the range `g(r)`.
pub fn estimate_omega_of_r(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    geom: &LocalGeometry,
    r_grid: &[f64],
    opts: &AuditOptions,
    nu0: f64,
    stream: RngStream,
) -> Result<OmegaProfile> {
    check_grid(r_grid)?;
    let (points, radius) = increment_points(geom, r_grid, opts);
    for t in &points {
        model.domain().check(t)?;
    }
    let sample = simulate_scores(model, truth, geom, &points, opts.mc_budget, stream)?;
    Ok(omega_from_sample(&sample, &radius, r_grid, geom, opts, nu0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdResult {
    pub rd: f64,
    pub delta_r0: f64,
    pub omega_r0: f64,
    pub nu0: f64,
    pub a_sq: f64,
    /// `rd <= 1/2`.
    pub applicable: bool,
}

/// `rd = delta(r0) + 3 nu0 a^2 omega(r0)`.
pub fn admissible_rd(delta_r0: f64, omega_r0: f64, nu0: f64, a_sq: f64) -> RdResult {
    let rd = delta_r0 + 3.0 * nu0 * a_sq * omega_r0;
    RdResult {
        rd,
        delta_r0,
        omega_r0,
        nu0,
        a_sq,
        applicable: rd <= CONDITION_CAP,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionFlags {
    pub delta_violated: bool,
    pub omega_violated: bool,
    pub ed0_failed: bool,
    pub heavy_tail: bool,
    pub identification_failure: bool,
    pub rd_exceeds_half: bool,
}

impl ConditionFlags {
    pub fn any(&self) -> bool {
        self.delta_violated
            || self.omega_violated
            || self.ed0_failed
            || self.identification_failure
            || self.rd_exceeds_half
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionProfile {
    pub r_grid: Vec<f64>,
    pub delta: DeltaProfile,
    pub omega: OmegaProfile,
    pub b: BProfile,
    pub ed0: Ed0Result,
    pub rd: RdResult,
    pub flags: ConditionFlags,
    pub options: AuditOptions,
}

impl ConditionProfile {
    pub fn nu0(&self) -> f64 {
        self.ed0.nu0
    }

    pub fn g_max(&self) -> f64 {
        self.ed0.g_max
    }
}

/// Run every condition estimate at the default grid and assemble the
/// profile.
pub fn audit_conditions(
    model: &dyn QuasiModel,
    truth: &TrueProcess,
    geom: &LocalGeometry,
    opts: &AuditOptions,
    stream: RngStream,
) -> Result<ConditionProfile> {
    let r_grid = default_r_grid(geom, opts.radii);
    let plan = opts.shell_plan(geom, geom.r0);
    let delta = estimate_delta_of_r(model, truth, geom, &r_grid, &plan)?;
    let b = estimate_b_of_r(model, truth, geom, &r_grid, &plan)?;
    let (points, radius) = increment_points(geom, &r_grid, opts);
    for t in &points {
        model.domain().check(t)?;
    }
    let sample = simulate_scores(model, truth, geom, &points, opts.mc_budget, stream)?;
    let g = opts.g_max(geom);
    let z_star: Vec<&Vector> = sample.whitened.iter().map(|row| &row[0]).collect();
    let ed0 = ed0_from_sample(
        &z_star,
        &unit_directions(geom.p, opts.mgf_directions.max(1)),
        &opts.lambda_grid(g),
        g,
        opts.nu0_cap,
    );
    let omega = omega_from_sample(&sample, &radius, &r_grid, geom, opts, ed0.nu0);
    let rd = admissible_rd(delta.profile.at_last(), omega.profile.at_last(), ed0.nu0, geom.a_sq);
    let flags = ConditionFlags {
        delta_violated: delta.violated,
        omega_violated: omega.violated,
        ed0_failed: !ed0.pass,
        heavy_tail: ed0.heavy_tail,
        identification_failure: b.identification_failure,
        rd_exceeds_half: !rd.applicable,
    };
    Ok(ConditionProfile {
        r_grid,
        delta,
        omega,
        b,
        ed0,
        rd,
        flags,
        options: *opts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorRegularity {
    pub alpha_hat: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// `sup_{Theta0(r0)} |pi(theta) / pi(theta*) - 1|` over the plan.
pub fn prior_regularity_check(prior: &Prior, geom: &LocalGeometry, plan: &ShellPlan, threshold: f64) -> Result<PriorRegularity> {
    let base = prior.log_density(&geom.theta_star);
    if !base.is_finite() {
        return Err(BvmError::InvalidArgument("prior density vanishes at theta*".into()));
    }
    let mut alpha_hat = 0.0f64;
    for &r in &plan.radii {
        for d in &plan.directions {
            let theta = geom.from_standardized(&(d * r));
            alpha_hat = alpha_hat.max(((prior.log_density(&theta) - base).exp() - 1.0).abs());
        }
    }
    Ok(PriorRegularity {
        alpha_hat,
        threshold,
        pass: alpha_hat <= threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPriorCheck {
    /// `|G theta*|`.
    pub g_theta_norm: f64,
    /// `|D0^-1 G^2 D0^-1|_op * p`.
    pub smallness: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn gaussian_prior_check(g_sq: &Matrix, geom: &LocalGeometry, threshold: f64) -> Result<GaussianPriorCheck> {
    if g_sq.nrows() != geom.p {
        return Err(BvmError::DimensionMismatch {
            expected: geom.p,
            got: g_sq.nrows(),
        });
    }
    let scaled = symmetrize(&(&geom.d0_inv * g_sq * &geom.d0_inv));
    let smallness = sym_op_norm(&scaled) * geom.p as f64;
    let g_theta_norm = geom.theta_star.dot(&(g_sq * &geom.theta_star)).max(0.0).sqrt();
    Ok(GaussianPriorCheck {
        g_theta_norm,
        smallness,
        threshold,
        pass: smallness < threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IidRateSummary {
    pub n: usize,
    pub p: usize,
    /// `delta(r0) sqrt(n) / r0`.
    pub delta_rate: f64,
    /// `omega(r0) sqrt(n) / r0`.
    pub omega_rate: f64,
    /// `p^3 / n`.
    pub critical_ratio: f64,
}

pub fn iid_rate_summary(n: usize, p: usize, delta_rate: f64, omega_rate: f64) -> Result<IidRateSummary> {
    if n == 0 || p == 0 {
        return Err(invalid("n and p must be positive"));
    }
    Ok(IidRateSummary {
        n,
        p,
        delta_rate,
        omega_rate,
        critical_ratio: (p as f64).powi(3) / n as f64,
    })
}

/// Rate constants read off a profile at `r0`.
pub fn rates_from_profile(profile: &ConditionProfile, geom: &LocalGeometry) -> Result<IidRateSummary> {
    let scale = (geom.n as f64).sqrt() / geom.r0;
    iid_rate_summary(
        geom.n,
        geom.p,
        profile.delta.profile.at_last() * scale,
        profile.omega.profile.at_last() * scale,
    )
}

/// Profile table with columns `r, delta, omega, b, delta_se, omega_se, b_se, g`.
pub fn write_profile_csv(profile: &ConditionProfile, path: &Path) -> Result<()> {
    let io = |e: csv::Error| BvmError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["r", "delta", "omega", "b", "delta_se", "omega_se", "b_se", "g"]).map_err(io)?;
    for k in 0..profile.r_grid.len() {
        let row = [
            profile.r_grid[k],
            profile.delta.profile.value[k],
            profile.omega.profile.value[k],
            profile.b.profile.value[k],
            profile.delta.profile.se[k],
            profile.omega.profile.se[k],
            profile.b.profile.se[k],
            profile.omega.g_of_r.value[k],
        ];
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
    }
    w.flush().map_err(|e| BvmError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compute_geometry, GeometryOptions};
    use crate::model::{Covariates, GlmModel, ResponseLaw};

    fn gaussian_mean(n: usize) -> (GlmModel, TrueProcess) {
        (
            GlmModel::gaussian_linear(1, 1.0).unwrap(),
            TrueProcess {
                response: ResponseLaw::GaussianNoise { sd: 1.0 },
                coef: Vector::from_vec(vec![0.5]),
                covariates: Covariates::intercept(n),
                matches_model: true,
            },
        )
    }

    #[test]
    fn gaussian_mean_profile_is_trivial() {
        let (m, t) = gaussian_mean(50);
        let geom = compute_geometry(&m, &t, 50, &GeometryOptions::default()).unwrap();
        let prof = audit_conditions(&m, &t, &geom, &AuditOptions::default(), RngStream::new(1, 0)).unwrap();
        assert!(prof.delta.profile.value.iter().all(|&d| d < 1e-10));
        assert!(prof.omega.profile.value.iter().all(|&w| w == 0.0));
        assert!(prof.b.profile.value.iter().all(|&b| (b - 0.5).abs() < 1e-10));
        assert!((prof.ed0.nu0_sq_raw - 1.0).abs() < 4.0 * prof.ed0.nu0_sq_se + 0.05, "{:?}", prof.ed0);
        assert!(prof.ed0.pass);
        assert!(prof.rd.rd < 1e-10);
        assert!(!prof.flags.any());
    }

    #[test]
    fn rd_formula_and_monotonicity() {
        let r = admissible_rd(0.02, 0.01, 1.0, 1.0);
        assert!((r.rd - 0.05).abs() < 1e-15);
        assert!(admissible_rd(0.02, 0.02, 1.0, 1.0).rd > r.rd);
        assert!(admissible_rd(0.02, 0.01, 2.0, 1.0).rd > r.rd);
        assert!(admissible_rd(0.02, 0.01, 1.0, 3.0).rd > r.rd);
        assert!(!admissible_rd(0.4, 0.1, 1.0, 1.0).applicable);
    }

    #[test]
    fn budget_below_minimum_is_rejected() {
        let (m, t) = gaussian_mean(10);
        let geom = compute_geometry(&m, &t, 10, &GeometryOptions::default()).unwrap();
        let opts = AuditOptions {
            mc_budget: 999,
            ..AuditOptions::default()
        };
        assert!(ed0_check(&m, &t, &geom, &opts, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn gaussian_prior_smallness_arithmetic() {
        let opts = GeometryOptions::default();
        let geom = LocalGeometry::from_parts(
            Vector::zeros(5),
            1000,
            Matrix::identity(5, 5) * 1000.0,
            Matrix::identity(5, 5) * 1000.0,
            &opts,
        )
        .unwrap();
        let c = gaussian_prior_check(&Matrix::identity(5, 5), &geom, DEFAULT_PRIOR_THRESHOLD).unwrap();
        assert!((c.smallness - 0.005).abs() < 1e-15);
        assert!(c.pass);
        assert_eq!(c.g_theta_norm, 0.0);
        let plan = ShellPlan::ball(5, geom.r0);
        let flat = prior_regularity_check(&Prior::Flat, &geom, &plan, DEFAULT_PRIOR_THRESHOLD).unwrap();
        assert_eq!(flat.alpha_hat, 0.0);
        // Gaussian prior: sup over the ball of 1 - exp(-g |theta|^2 / 2)
        let g = 0.01;
        let pr = prior_regularity_check(&Prior::isotropic(5, g).unwrap(), &geom, &plan, DEFAULT_PRIOR_THRESHOLD).unwrap();
        let rmax = geom.r0 / 1000f64.sqrt();
        let want = 1.0 - (-g * rmax * rmax / 2.0).exp();
        assert!((pr.alpha_hat - want).abs() < 1e-12);
    }

    #[test]
    fn iid_ratio_examples() {
        assert_eq!(iid_rate_summary(1000, 10, 0.0, 0.0).unwrap().critical_ratio, 1.0);
        assert_eq!(iid_rate_summary(8000, 20, 0.0, 0.0).unwrap().critical_ratio, 1.0);
        assert!((iid_rate_summary(1_000_000, 10, 0.0, 0.0).unwrap().critical_ratio - 0.001).abs() < 1e-15);
    }

    #[test]
    fn cumulant_inverse_recovers_gaussian_scale() {
        // y ~ N(0, s^2) exactly on a symmetric grid: omega = s / nu0
        let s = 0.3;
        let y: Vec<f64> = (1..20000)
            .map(|i| s * crate::special::norm_ppf(i as f64 / 20000.0))
            .collect();
        let (w, _) = increment_scale(&y, &[-1.0, -0.5, 0.5, 1.0], 1.0);
        assert!((w - s).abs() < 0.01 * s, "{w}");
    }
}
