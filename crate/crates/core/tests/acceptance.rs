//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line. Run with
//! `cargo test --release -p bvm-core --test acceptance -- --nocapture --include-ignored`.
//!
//! Reference values are computed here, independently of the library paths
//! under test (statrs for chi-square laws, direct Monte Carlo and
//! trace/log-determinant forms for the Gaussian comparisons).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bvm_core::bracketing::{error_budget, estimate_err_brackets, gauss_restricted_mgf_bounds, nu_r0};
use bvm_core::credible::SetKind;
use bvm_core::geometry::{bracket_pair, score_state, GeometryOptions, LocalGeometry};
use bvm_core::harness::run::{build_scenario, run_coverage, Scenario};
use bvm_core::harness::{
    audit_experiment, run_experiment, sweep_critical_dimension, sweep_gaussian_prior, ExperimentConfig, PriorAxis,
};
use bvm_core::metrics::{bvm_report, shell_check, cov_discrepancy, gaussian_kl_tv, random_lambdas};
use bvm_core::model::{sample_dataset, Dataset, GlmModel, QuasiModel};
use bvm_core::posterior::{compute_posterior, exact_gaussian_posterior, posterior_moments, ChainConfig, MomentKind, PosteriorMode};
use bvm_core::sampling::ShellPlan;
use bvm_core::{Matrix, RngStream, Vector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn verdict(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {id:>2} {name}: {}", detail.as_ref());
    pass
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_path(&config_path(name)).unwrap()
}

fn gaussian_linear_cfg(n: usize, p: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
schema_version = 1
scenario = "gaussian-linear"
seed = {seed}

[model]
family = "gaussian-linear"
n = {n}
p = {p}

[truth]
design = "fixed"
"#
    ))
    .unwrap()
}

fn first_dataset(sc: &Scenario, seed: u64) -> Dataset {
    use bvm_core::rng::tags;
    sample_dataset(&sc.truth, sc.geom.n, RngStream::new(seed, 0).substream(tags::DATA).substream(0)).unwrap()
}

fn normal_vec(rng: &mut impl Rng, p: usize) -> Vector {
    Vector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

#[test]
fn criterion_01_exact_gaussian_zero_error() {
    let start = Instant::now();
    let cfg = gaussian_linear_cfg(100, 5, 101);
    let sc = build_scenario(&cfg).unwrap();
    let model: &dyn QuasiModel = &sc.model;
    let data = first_dataset(&sc, cfg.seed);
    let state = score_state(model, &data, &sc.geom).unwrap();
    let post = compute_posterior(model, &data, &sc.prior, &sc.geom, &PosteriorMode::Exact, RngStream::new(1, 0)).unwrap();
    let summary = posterior_moments(&post, &sc.geom, RngStream::new(1, 1)).unwrap();
    let lambdas = random_lambdas(5, 50, RngStream::new(1, 2));
    assert!(lambdas.iter().all(|l| l.norm_squared() <= 5.0 + 1e-12));
    let r = bvm_report(&post, &summary, &sc.geom, &state, MomentKind::Full, &lambdas, &[], 0.0, None, RngStream::new(1, 3))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r.mean_disc <= 1e-10 && r.cov_disc_op <= 1e-10 && r.mgf_disc <= 1e-10 && secs < 1.0;
    assert!(verdict(
        1,
        "exact Gaussian zero error",
        pass,
        format!("mean {:.2e} cov_op {:.2e} mgf {:.2e} (tol 1e-10), {secs:.3}s", r.mean_disc, r.cov_disc_op, r.mgf_disc)
    ));
}

#[test]
fn criterion_02_mcmc_fidelity() {
    let start = Instant::now();
    let cfg = gaussian_linear_cfg(100, 5, 202);
    let sc = build_scenario(&cfg).unwrap();
    let model: &dyn QuasiModel = &sc.model;
    let data = first_dataset(&sc, cfg.seed);
    let exact = exact_gaussian_posterior(model, &data, &sc.prior, &sc.geom).unwrap();
    let chain = ChainConfig {
        draws: 200_000,
        ..ChainConfig::default()
    };
    let post = compute_posterior(model, &data, &sc.prior, &sc.geom, &PosteriorMode::Sampler(chain), RngStream::new(2, 0))
        .unwrap();
    let summary = posterior_moments(&post, &sc.geom, RngStream::new(2, 1)).unwrap();
    let worst_z = (0..5)
        .map(|j| {
            let tol = exact.cov[(j, j)].sqrt() / summary.ess_per_coord[j].sqrt();
            (summary.mean[j] - exact.mean[j]).abs() / tol
        })
        .fold(0.0f64, f64::max);
    let cov_op = cov_discrepancy(&summary.cov, &sc.geom).op_norm;
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_z <= 4.0 && cov_op <= 0.05 && secs < 30.0;
    assert!(verdict(
        2,
        "MCMC fidelity",
        pass,
        format!(
            "max |mean - exact| / (sd/sqrt(ESS)) = {worst_z:.2} (<= 4), cov_disc_op {cov_op:.4} (<= 0.05), min ESS {:.0}, {secs:.1}s",
            summary.ess
        )
    ));
}

/// `KL(N(0, I), N(delta, B^-1))` from the trace and Cholesky log-determinant.
fn kl_reference(b: &Matrix, delta: &Vector) -> f64 {
    let p = b.nrows() as f64;
    let chol = b.clone().cholesky().unwrap();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    0.5 * (b.trace() - p + delta.dot(&(b * delta)) - log_det)
}

/// `TV(N(0, I), N(delta, B^-1)) = E_0 (1 - p_1 / p_0)_+` with its standard error.
fn tv_mc(b: &Matrix, delta: &Vector, draws: usize, rng: &mut impl Rng) -> (f64, f64) {
    let p = b.nrows();
    let half_log_det = b.clone().cholesky().unwrap().l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let g = normal_vec(rng, p);
        let c = &g - delta;
        let log_ratio = half_log_det - 0.5 * c.dot(&(b * &c)) + 0.5 * g.norm_squared();
        let w = (1.0 - log_ratio.exp()).max(0.0);
        s += w;
        s2 += w * w;
    }
    let k = draws as f64;
    let mean = s / k;
    (mean, ((s2 / k - mean * mean).max(0.0) / k).sqrt())
}

#[test]
fn criterion_03_kl_tv_bound() {
    let start = Instant::now();
    let mut rng = RngStream::new(303, 0).rng();
    let (mut kl_ok, mut tv_ok, mut worst_ref) = (0, 0, 0.0f64);
    let mut worst_tv_margin = f64::NEG_INFINITY;
    for _ in 0..100 {
        let p = rng.random_range(1..=6);
        let rd: f64 = rng.random_range(0.05..=0.5);
        let q = Matrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let a = Vector::from_iterator(p, (0..p).map(|_| rng.random_range(-rd..=rd)));
        let b = Matrix::identity(p, p) + &q * Matrix::from_diagonal(&a) * q.transpose();
        let b = (&b + b.transpose()) * 0.5;
        let delta = normal_vec(&mut rng, p) * (rng.random_range(0.0..1.5) / (p as f64).sqrt());
        let g = gaussian_kl_tv(&b, &delta, Some(rd)).unwrap();
        let kl_ref = kl_reference(&b, &delta);
        worst_ref = worst_ref.max((g.kl - kl_ref).abs());
        if g.kl <= g.kl_bound.unwrap() && (g.kl - kl_ref).abs() <= 1e-10 * (1.0 + kl_ref) {
            kl_ok += 1;
        }
        let (tv, se) = tv_mc(&b, &delta, 20_000, &mut rng);
        let bound = (kl_ref / 2.0).sqrt() + 3.0 * se;
        worst_tv_margin = worst_tv_margin.max(tv - bound);
        if tv <= bound {
            tv_ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = kl_ok == 100 && tv_ok == 100 && secs < 60.0;
    assert!(verdict(
        3,
        "KL/TV bound",
        pass,
        format!(
            "KL bound held {kl_ok}/100 (max |KL - reference| {worst_ref:.1e}), TV bound held {tv_ok}/100 (max TV - bound {worst_tv_margin:.3}), {secs:.1}s"
        )
    ));
}

#[test]
fn criterion_04_shell_concentration() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut all = true;
    for p in [10usize, 100] {
        let cfg = gaussian_linear_cfg(10 * p, p, 404);
        let sc = build_scenario(&cfg).unwrap();
        let model: &dyn QuasiModel = &sc.model;
        let data = first_dataset(&sc, cfg.seed);
        let state = score_state(model, &data, &sc.geom).unwrap();
        let post = exact_gaussian_posterior(model, &data, &sc.prior, &sc.geom).unwrap();
        let post = bvm_core::posterior::Posterior::Exact(post);
        for rd in [0.0, 0.1] {
            let pair = bracket_pair(&sc.geom, &state, rd).unwrap();
            // the Gaussian log-likelihood is exactly quadratic: both bracket errors vanish
            let nu = nu_r0(&state.xi, sc.geom.r0).unwrap();
            let budget = error_budget(0.0, 0.0, &pair, nu, 0.0, p);
            let xs = [4.0, p as f64 / 8.0];
            let recs = shell_check(&post, &sc.geom, &pair, &xs, budget.delta_plus).unwrap();
            // independent check of the rd = 0 case: eta is exactly standard normal
            if rd == 0.0 {
                let chi = ChiSquared::new(p as f64).unwrap();
                for r in &recs {
                    let w = (2.0 * p as f64 * r.x).sqrt();
                    let up = 1.0 - chi.cdf(p as f64 + w);
                    let lo = chi.cdf(p as f64 - w);
                    assert!((r.upper_measured - up).abs() < 1e-9 && (r.lower_measured - lo).abs() < 1e-9, "{r:?}");
                }
            }
            for r in &recs {
                let ok = r.upper_measured <= r.upper_bound && r.lower_measured <= r.lower_bound;
                all &= ok;
                lines.push(format!(
                    "p={p} rd={rd} x={}: up {:.2e}<={:.2e} lo {:.2e}<={:.2e}",
                    r.x, r.upper_measured, r.upper_bound, r.lower_measured, r.lower_bound
                ));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(verdict(4, "shell concentration", all && secs < 1.0, format!("{}; {secs:.3}s", lines.join("; "))));
}

#[test]
fn criterion_05_restricted_mgf() {
    let start = Instant::now();
    let mut rng = RngStream::new(505, 0).rng();
    let draws = 1_000_000;
    let (mut upper_ok, mut lower_ok) = (0, 0);
    for _ in 0..50 {
        let p = rng.random_range(1..=5usize);
        let pf = p as f64;
        let x: f64 = rng.random_range(0.5..5.0);
        let r = (4.0 * (pf + x)).sqrt() * rng.random_range(1.0..1.3);
        let mu: f64 = rng.random_range(0.1..0.9);
        let dir = normal_vec(&mut rng, p).normalize();
        let lambda = dir * (rng.random_range(0.0..=1.0) * pf).sqrt();
        let bounds = gauss_restricted_mgf_bounds(&lambda, r, mu, x).unwrap();
        // E[exp(lambda^T g) 1(|g| > r)] = exp(|lambda|^2 / 2) P(|g + lambda| > r)
        let mut outside = 0usize;
        for _ in 0..draws {
            let v = normal_vec(&mut rng, p) + &lambda;
            if v.norm_squared() > r * r {
                outside += 1;
            }
        }
        let full = (lambda.norm_squared() / 2.0).exp();
        let out_est = full * outside as f64 / draws as f64;
        let in_est = full * (draws - outside) as f64 / draws as f64;
        if out_est <= bounds.upper_tail_log.exp() {
            upper_ok += 1;
        }
        if in_est >= bounds.lower_restricted {
            lower_ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = upper_ok == 50 && lower_ok == 50 && secs < 60.0;
    assert!(verdict(
        5,
        "restricted MGF bounds",
        pass,
        format!("upper held {upper_ok}/50, lower held {lower_ok}/50, {secs:.1}s")
    ));
}

fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}

#[test]
fn criterion_06_critical_dimension_trend() {
    let start = Instant::now();
    let cfg = load("logistic-critical.toml");
    assert_eq!(cfg.sweep.ratios, vec![0.01, 0.1, 1.0, 10.0]);
    let report = sweep_critical_dimension(&cfg, &cfg.sweep.ratios, 20).unwrap();
    assert!(report.rows.iter().all(|r| r.error.is_none() && r.replications.len() == 20));
    let mut pass = true;
    let mut detail = Vec::new();
    for metric in ["cov_disc_op", "mean_disc"] {
        let med: Vec<f64> = report.rows.iter().map(|r| r.metrics[metric].median).collect();
        let inv = inversions(&med);
        let halved = med[0] < med[med.len() - 1] / 2.0;
        pass &= inv <= 1 && halved;
        detail.push(format!(
            "{metric} medians [{}] inversions {inv}",
            med.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(", ")
        ));
    }
    let ratios: Vec<f64> = report.rows.iter().map(|r| r.ratio).collect();
    assert_eq!(ratios, vec![0.01, 0.1, 1.0, 10.0]);
    let secs = start.elapsed().as_secs_f64();
    assert!(verdict(6, "critical-dimension trend", pass, format!("{}; {secs:.0}s", detail.join("; "))));
}

#[test]
fn criterion_07_coverage_calibration() {
    let start = Instant::now();
    let chi1 = ChiSquared::new(1.0).unwrap();
    let z = chi1.inverse_cdf(0.95);
    let mut pass = true;
    let mut detail = Vec::new();
    // the working model has unit variance; doubled data variance scales the score covariance by 2
    for (file, oracle, tol) in [
        ("gaussian-coverage.toml", 0.95, 4.0 * (0.05f64 * 0.95 / 2000.0).sqrt()),
        ("misspecified-coverage.toml", chi1.cdf(z / 2.0), 0.03),
    ] {
        let cfg = load(file);
        let spec = cfg.coverage.unwrap();
        assert_eq!((spec.kind, spec.alpha, spec.reps), (SetKind::Oracle, 0.05, 2000));
        let sc = build_scenario(&cfg).unwrap();
        let c = run_coverage(&cfg, &sc).unwrap().unwrap();
        assert_eq!(c.n_reps, 2000);
        let ok = (c.rate - oracle).abs() <= tol;
        pass &= ok;
        detail.push(format!("{file}: rate {:.4} vs oracle {oracle:.5} (tol {tol:.4})", c.rate));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(verdict(7, "coverage calibration", pass, format!("{}; {secs:.1}s", detail.join("; "))));
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let m = v.iter().sum::<f64>() / k;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (k - 1.0);
    (m, (var / k).sqrt())
}

#[test]
fn criterion_08_gaussian_prior_threshold() {
    let start = Instant::now();
    let cfg = load("prior-sweep.toml");
    let report = sweep_gaussian_prior(&cfg, PriorAxis::Smallness, &[0.005, 5.0], 20).unwrap();
    let per_metric = |outs: &[bvm_core::harness::RepOutcome]| -> BTreeMap<&'static str, Vec<f64>> {
        let mut m: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        for o in outs {
            let r = o.result.as_ref().unwrap();
            m.entry("mean_disc").or_default().push(r.bvm.mean_disc);
            m.entry("cov_disc_op").or_default().push(r.bvm.cov_disc_op);
            m.entry("cov_disc_tr").or_default().push(r.bvm.cov_disc_tr);
            m.entry("mgf_disc").or_default().push(r.bvm.mgf_disc);
            m.entry("prob_disc").or_default().push(r.bvm.prob_disc);
        }
        m
    };
    let base = per_metric(&report.baseline_replications);
    let z_scores = |row: &bvm_core::harness::PriorSweepRow| -> BTreeMap<&'static str, (f64, f64)> {
        per_metric(&row.replications)
            .into_iter()
            .map(|(k, v)| {
                let (a, sa) = mean_and_se(&base[k]);
                let (b, sb) = mean_and_se(&v);
                (k, (b - a, (sa * sa + sb * sb).sqrt()))
            })
            .collect()
    };
    let small = &report.rows[0];
    let large = &report.rows[1];
    let zs = z_scores(small);
    let small_ok = zs.values().all(|(d, noise)| d.abs() <= 3.0 * noise) && small.prior_check.unwrap().pass;
    let worst = zs.values().map(|(d, n)| d.abs() / n).fold(0.0f64, f64::max);
    let (d_mean, noise_mean) = z_scores(large)["mean_disc"];
    let large_ok = d_mean > 10.0 * noise_mean && !large.prior_check.unwrap().pass;
    let secs = start.elapsed().as_secs_f64();
    assert!(verdict(
        8,
        "Gaussian prior threshold",
        small_ok && large_ok,
        format!(
            "smallness 0.005: max |delta|/noise {worst:.2} (<= 3), check pass; smallness 5: mean_disc delta {d_mean:.3e} = {:.1} x noise (> 10), check {}; {secs:.1}s",
            d_mean / noise_mean,
            if large.prior_check.unwrap().pass { "pass" } else { "fail" }
        )
    ));
}

/// The one-sided upper gap `sup L - Lambda_ub` is `-rd |u|^2 / 2 <= 0` here, so
/// the estimate is 0 and the expected 0.45 cannot be met; 0.45 is the reverse
/// gap, reported as `slack_ub`. Kept as a failing record of the mismatch.
#[test]
#[ignore = "expected value matches the reverse gap, not err_ub; fails by construction"]
fn criterion_09_bracketing_closed_form() {
    let start = Instant::now();
    let model = GlmModel::gaussian_linear(1, 1.0).unwrap();
    // one observation at 0: score zero at theta* = 0
    let data = Dataset::new(Matrix::from_element(1, 1, 1.0), Vector::from_vec(vec![0.0])).unwrap();
    let opts = GeometryOptions {
        r0: Some(3.0),
        ..GeometryOptions::default()
    };
    let geom = LocalGeometry::from_parts(Vector::zeros(1), 1, Matrix::identity(1, 1), Matrix::identity(1, 1), &opts).unwrap();
    let state = score_state(&model, &data, &geom).unwrap();
    assert_eq!(state.xi[0], 0.0);
    let pair = bracket_pair(&geom, &state, 0.1).unwrap();
    let e = estimate_err_brackets(&model, &data, &geom, &pair, &ShellPlan::ball(1, 3.0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = (e.err_ub - 0.45).abs() <= 1e-3 && secs < 1.0;
    assert!(verdict(
        9,
        "bracketing closed form",
        pass,
        format!("err_ub {:.6} vs 0.45 (tol 1e-3); reverse gap slack_ub {:.6}; {secs:.3}s", e.err_ub, e.slack_ub)
    ));
}

fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

const SMALL_LOGISTIC: &str = r#"
schema_version = 1
scenario = "small-logistic"
seed = 17
reps = 5

[model]
family = "logistic"
n = 200
p = 3

[truth]
design = "gaussian"

[posterior]
mode = "sampler"
dump_draws = true

[posterior.chain]
draws = 5000
burn_in = 5000

[audit]
mc_budget = 1000
radii = 4

[sweep]
ratios = [0.1, 1.0]
p = [3, 3]
"#;

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let logistic = ExperimentConfig::from_toml_str(SMALL_LOGISTIC).unwrap();
    let mut exact = load("gaussian-exact.toml");
    exact.reps = 3;
    exact.audit.mc_budget = 1000;
    let mut coverage = load("misspecified-coverage.toml");
    coverage.coverage.as_mut().unwrap().reps = 200;
    coverage.audit.mc_budget = 1000;
    let mut prior = load("prior-sweep.toml");
    prior.posterior.chain.draws = 5000;
    prior.audit.mc_budget = 1000;
    let jobs: Vec<(&str, Box<dyn Fn(&Path) + Sync>)> = vec![
        ("run-exact", Box::new(|d: &Path| run_experiment(&exact).unwrap().emit(d).unwrap())),
        ("run-coverage", Box::new(|d: &Path| run_experiment(&coverage).unwrap().emit(d).unwrap())),
        ("run-sampler", Box::new(|d: &Path| run_experiment(&logistic).unwrap().emit(d).unwrap())),
        ("audit", Box::new(|d: &Path| audit_experiment(&logistic).unwrap().emit(d).unwrap())),
        (
            "sweep-critical",
            Box::new(|d: &Path| sweep_critical_dimension(&logistic, &logistic.sweep.ratios, 5).unwrap().emit(d).unwrap()),
        ),
        (
            "sweep-prior",
            Box::new(|d: &Path| sweep_gaussian_prior(&prior, PriorAxis::Smallness, &[0.005, 5.0], 5).unwrap().emit(d).unwrap()),
        ),
    ];
    let mut mismatches = Vec::new();
    let mut files = 0;
    for (name, job) in &jobs {
        let outputs: Vec<BTreeMap<PathBuf, Vec<u8>>> = [1usize, 2, 8]
            .iter()
            .map(|&t| {
                let dir = tmp.path().join(format!("{name}-{t}"));
                with_threads(t, || job(&dir));
                dir_bytes(&dir)
            })
            .collect();
        files += outputs[0].len();
        if outputs[1] != outputs[0] || outputs[2] != outputs[0] {
            mismatches.push(*name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(verdict(
        10,
        "determinism across 1, 2, 8 threads",
        mismatches.is_empty(),
        format!("{} commands, {files} files per thread count, mismatched: {mismatches:?}; {secs:.1}s", jobs.len())
    ));
}
