//! Discrepancies between the posterior and its Gaussian approximation, and
//! the Gaussian comparison bounds behind them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bracketing::ErrorBudget;
use crate::error::{invalid, Result};
use crate::geometry::{BracketPair, LocalGeometry, ScoreState};
use crate::linalg::{project_psd, sym_eigenvalues, sym_op_norm, symmetrize, Matrix, Vector};
use crate::posterior::{
    gaussian_set_probability, posterior_mgf, set_probability, MgfEstimate, MomentKind, Posterior, PosteriorSummary, SetSpec,
};
use crate::rng::RngStream;
use crate::special::{noncentral_chi2_cdf, noncentral_chi2_sf};

/// Default multiplier on terms that carry an unspecified constant.
pub const DEFAULT_SLACK: f64 = 3.0;

/// `|D0 (mean - theta_circ)|^2`.
pub fn mean_discrepancy(mean: &Vector, state: &ScoreState, geom: &LocalGeometry) -> f64 {
    (&geom.d0 * (mean - &state.theta_circ)).norm_squared()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovDiscrepancy {
    /// `|I - D0 S D0|` in operator norm.
    pub op_norm: f64,
    /// `|D0 S D0 - I|_F^2`.
    pub trace_form: f64,
    /// The covariance was not PSD and was projected.
    pub projected: bool,
}

pub fn cov_discrepancy(cov: &Matrix, geom: &LocalGeometry) -> CovDiscrepancy {
    let (cov, projected) = project_psd(cov);
    let dev = symmetrize(&(&geom.d0 * cov * &geom.d0)) - Matrix::identity(geom.p, geom.p);
    CovDiscrepancy {
        op_norm: sym_op_norm(&dev),
        trace_form: dev.norm_squared(),
        projected,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgfDiscrepancy {
    /// `max |log MGF(lambda) - |lambda|^2 / 2|`.
    pub value: f64,
    pub argmax: Vec<f64>,
    /// Standard error of the estimate at the maximizer.
    pub se: f64,
    /// Largest `4 SE` over the set, the noise envelope in sampling mode.
    pub noise: f64,
}

pub fn mgf_discrepancy(estimates: &[MgfEstimate]) -> MgfDiscrepancy {
    let mut out = MgfDiscrepancy {
        value: 0.0,
        argmax: Vec::new(),
        se: 0.0,
        noise: 0.0,
    };
    for e in estimates {
        let l2: f64 = e.lambda.iter().map(|v| v * v).sum();
        let d = (e.log_mgf - 0.5 * l2).abs();
        if d > out.value || out.argmax.is_empty() {
            out.value = d;
            out.argmax = e.lambda.clone();
            out.se = e.se;
        }
        out.noise = out.noise.max(4.0 * e.se);
    }
    out
}

/// `count` vectors uniform in the ball `|lambda|^2 <= p`.
pub fn random_lambdas(p: usize, count: usize, stream: RngStream) -> Vec<Vector> {
    let mut rng = stream.rng();
    (0..count)
        .map(|_| {
            let z = Vector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let u: f64 = rng.random();
            z.normalize() * ((p as f64).sqrt() * u.powf(1.0 / p as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRecord {
    pub label: String,
    pub measured: f64,
    pub measured_se: f64,
    /// `P(gamma in A)`.
    pub gaussian: f64,
    /// `exp(Delta+) P(D0 D_ub^-1 gamma + delta_rd in A)`.
    pub shifted_upper: f64,
    /// `exp(-c rd q) (P(gamma in A) - c rd sqrt(q)) - c exp(-x_n)`.
    pub sandwich_lower: f64,
    /// `exp(c rd q) (P(gamma in A) + c rd sqrt(q)) + c exp(-x_n)`.
    pub sandwich_upper: f64,
    pub pass_shifted: bool,
    pub pass_sandwich: bool,
}

pub struct ProbeSet {
    pub label: String,
    pub set: SetSpec,
}

/// Posterior probabilities of probe sets against both Gaussian sandwiches.
#[allow(clippy::too_many_arguments)]
pub fn prob_sandwich_check(
    post: &Posterior,
    geom: &LocalGeometry,
    state: &ScoreState,
    pair: &BracketPair,
    probes: &[ProbeSet],
    budget: &ErrorBudget,
    slack: f64,
    ess: f64,
    stream: RngStream,
) -> Result<Vec<ProbRecord>> {
    let p = geom.p;
    let rd = budget.rd;
    let q = budget.q;
    // D0 D_ub^-1 gamma + delta_rd ~ N(delta_rd, I / (1 - rd))
    let shifted_cov = Matrix::identity(p, p) / (1.0 - rd);
    probes
        .iter()
        .enumerate()
        .map(|(k, probe)| {
            let s = stream.substream(k as u64);
            let (measured, measured_se) = set_probability(post, geom, state, &probe.set, ess, s.substream(0))?;
            let (gaussian, _) = gaussian_set_probability(&probe.set, &Vector::zeros(p), &Matrix::identity(p, p), s.substream(1))?;
            let (shifted, _) = gaussian_set_probability(&probe.set, &pair.delta_rd_vec, &shifted_cov, s.substream(2))?;
            let shifted_upper = budget.delta_plus.exp() * shifted;
            let tail = slack * (-geom.x_n).exp();
            let sandwich_lower = (-slack * rd * q).exp() * (gaussian - slack * rd * q.sqrt()) - tail;
            let sandwich_upper = (slack * rd * q).exp() * (gaussian + slack * rd * q.sqrt()) + tail;
            let noise = 4.0 * measured_se;
            Ok(ProbRecord {
                label: probe.label.clone(),
                measured,
                measured_se,
                gaussian,
                shifted_upper,
                sandwich_lower,
                sandwich_upper,
                pass_shifted: measured <= shifted_upper + noise,
                pass_sandwich: measured + noise >= sandwich_lower && measured <= sandwich_upper + noise,
            })
        })
        .collect()
}

/// Default probes: the central ball of Gaussian mass one half, its
/// complement and the half-space `{w_1 > 0}`.
pub fn default_probes(p: usize) -> Vec<ProbeSet> {
    let median = crate::special::chi2_quantile(p, 0.5);
    let ball = SetSpec::Ball { radius_sq: median };
    let mut normal = vec![0.0; p];
    normal[0] = 1.0;
    vec![
        ProbeSet {
            label: "ball-median".into(),
            set: ball.clone(),
        },
        ProbeSet {
            label: "ball-median-complement".into(),
            set: SetSpec::Complement { inner: Box::new(ball) },
        },
        ProbeSet {
            label: "half-space-first".into(),
            set: SetSpec::HalfSpace { normal, offset: 0.0 },
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussCompare {
    /// `KL(N(0, I), N(delta, B^-1))`.
    pub kl: f64,
    /// `sqrt(kl / 2)`.
    pub tv_bound: f64,
    /// `(rd^2 p + (1 + rd) |delta|^2) / 2` when `|B - I| <= rd <= 1/2` is declared.
    pub kl_bound: Option<f64>,
}

/// `2 KL = sum_j (a_j - log(1 + a_j)) + delta^T B delta` with `a_j` the
/// eigenvalues of `B - I`.
pub fn gaussian_kl_tv(b: &Matrix, delta: &Vector, declared_rd: Option<f64>) -> Result<GaussCompare> {
    let p = b.nrows();
    if b.ncols() != p || delta.len() != p {
        return Err(invalid("B must be square and match delta"));
    }
    let b = symmetrize(b);
    let a = sym_eigenvalues(&(&b - Matrix::identity(p, p)));
    if a.iter().any(|&x| x <= -1.0) {
        return Err(invalid("B must be positive definite"));
    }
    let two_kl: f64 = a.iter().map(|&x| x - x.ln_1p()).sum::<f64>() + delta.dot(&(&b * delta));
    let kl = (0.5 * two_kl).max(0.0);
    let kl_bound = match declared_rd {
        Some(rd) => {
            let dev = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if rd > 0.5 || dev > rd * (1.0 + 1e-12) {
                return Err(invalid(format!("|B - I| = {dev} is not within declared rd = {rd} <= 1/2")));
            }
            Some(0.5 * (rd * rd * p as f64 + (1.0 + rd) * delta.norm_squared()))
        }
        None => None,
    };
    Ok(GaussCompare {
        kl,
        tv_bound: (kl / 2.0).sqrt(),
        kl_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellRecord {
    pub x: f64,
    /// `P(|eta|^2 - p > sqrt(2 p x))`.
    pub upper_measured: f64,
    /// `exp(-x/4 + Delta+)`.
    pub upper_bound: f64,
    /// `P(|eta|^2 - p < -sqrt(2 p x))`.
    pub lower_measured: f64,
    /// `exp(-x/2 + Delta+)`.
    pub lower_bound: f64,
    pub pass: bool,
}

/// Concentration of `eta = D_ub (theta - theta_ub)` on the shell
/// `| |eta|^2 - p | <= sqrt(2 p x)`.
pub fn shell_check(
    post: &Posterior,
    geom: &LocalGeometry,
    pair: &BracketPair,
    x_values: &[f64],
    delta_plus: f64,
) -> Result<Vec<ShellRecord>> {
    let p = geom.p as f64;
    for &x in x_values {
        if !(x >= 0.0) || x > p / 2.0 {
            return Err(invalid(format!("x = {x} must lie in [0, p/2]")));
        }
    }
    let d_ub = &geom.d0 * pair.scale_ub;
    // tail probabilities of |eta|^2 at the two thresholds
    let tails: Box<dyn Fn(f64, f64) -> (f64, f64)> = match post {
        Posterior::Exact(g) => {
            let mu = &d_ub * (&g.mean - &pair.theta_ub);
            let s = symmetrize(&(&d_ub * &g.cov * &d_ub));
            // |eta|^2 / c is noncentral chi-square when S = c I
            let c = s.trace() / p;
            if (&s - Matrix::identity(geom.p, geom.p) * c).amax() > 1e-12 * c.max(1.0) {
                return Err(crate::error::BvmError::Unsupported(
                    "closed-form shell probabilities need a scalar standardized covariance".into(),
                ));
            }
            let nc = mu.norm_squared() / c;
            Box::new(move |hi, lo| (noncentral_chi2_sf(p, nc, hi / c), noncentral_chi2_cdf(p, nc, lo / c)))
        }
        Posterior::Sample(s) => {
            let norms: Vec<f64> = (0..s.len()).map(|i| (&d_ub * (s.draw(i) - &pair.theta_ub)).norm_squared()).collect();
            Box::new(move |hi, lo| {
                let k = norms.len() as f64;
                (
                    norms.iter().filter(|&&v| v > hi).count() as f64 / k,
                    norms.iter().filter(|&&v| v < lo).count() as f64 / k,
                )
            })
        }
    };
    Ok(x_values
        .iter()
        .map(|&x| {
            let w = (2.0 * p * x).sqrt();
            let (upper_measured, lower_measured) = tails(p + w, p - w);
            let upper_bound = (-x / 4.0 + delta_plus).exp();
            let lower_bound = (-x / 2.0 + delta_plus).exp();
            ShellRecord {
                x,
                upper_measured,
                upper_bound,
                lower_measured,
                lower_bound,
                pass: upper_measured <= upper_bound && lower_measured <= lower_bound,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub rd_exceeds_half: bool,
    pub low_precision: bool,
    pub cov_projected: bool,
    pub conditions_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvmReport {
    pub moments: MomentKind,
    pub mean_disc: f64,
    pub cov_disc_op: f64,
    pub cov_disc_tr: f64,
    pub mgf_disc: f64,
    pub mgf_argmax: Vec<f64>,
    pub mgf_noise: f64,
    pub prob_disc: f64,
    pub rd: f64,
    pub q: f64,
    pub budget: Option<ErrorBudget>,
    pub flags: MetricFlags,
}

impl BvmReport {
    /// `metric / (rd q)` for the three main discrepancies.
    pub fn budget_ratios(&self) -> [f64; 3] {
        let s = self.rd * self.q;
        [self.mean_disc / s, self.cov_disc_op / s, self.mgf_disc / s]
    }
}

/// Assemble the discrepancy report for one posterior. `prob_disc` is the
/// largest `|P(w in A) - P(gamma in A)|` over the probes, `w` the standardized
/// posterior draw and `gamma` standard normal.
#[allow(clippy::too_many_arguments)]
pub fn bvm_report(
    post: &Posterior,
    summary: &PosteriorSummary,
    geom: &LocalGeometry,
    state: &ScoreState,
    kind: MomentKind,
    lambdas: &[Vector],
    probes: &[ProbeSet],
    rd: f64,
    budget: Option<ErrorBudget>,
    stream: RngStream,
) -> Result<BvmReport> {
    let (mean, _) = summary.moments(kind);
    let (cov, projected) = summary.psd_cov(kind);
    let cov_disc = cov_discrepancy(&cov, geom);
    let mgf = mgf_discrepancy(&posterior_mgf(post, geom, state, lambdas, kind, stream.substream(0))?);
    let mut prob_disc = 0.0f64;
    for (k, probe) in probes.iter().enumerate() {
        let s = stream.substream(1 + k as u64);
        let (measured, _) = set_probability(post, geom, state, &probe.set, summary.ess, s.substream(0))?;
        let (gaussian, _) = probe.set.standard_gaussian_probability(geom.p, s.substream(1))?;
        prob_disc = prob_disc.max((measured - gaussian).abs());
    }
    Ok(BvmReport {
        moments: kind,
        mean_disc: mean_discrepancy(mean, state, geom),
        cov_disc_op: cov_disc.op_norm,
        cov_disc_tr: cov_disc.trace_form,
        mgf_disc: mgf.value,
        mgf_argmax: mgf.argmax,
        mgf_noise: mgf.noise,
        prob_disc,
        rd,
        q: state.q,
        budget,
        flags: MetricFlags {
            rd_exceeds_half: rd > 0.5,
            low_precision: summary.low_precision,
            cov_projected: projected || cov_disc.projected,
            conditions_flagged: false,
        },
    })
}
