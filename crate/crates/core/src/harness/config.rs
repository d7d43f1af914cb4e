//! Versioned TOML experiment configuration.
//!
//! Every optional field has a default; [`ExperimentConfig::resolved`] fills
//! them in so the emitted report carries the exact configuration that ran.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audit::AuditOptions;
use crate::credible::SetKind;
use crate::error::{BvmError, Result};
use crate::model::{Family, ResponseLaw};
use crate::posterior::{ChainConfig, MomentKind, PosteriorMode};
use crate::sampling::{ShellPlan, DEFAULT_RADII, POLISH_STEPS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub reps: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub truth: TruthSpec,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub bracketing: BracketingSpec,
    #[serde(default)]
    pub posterior: PosteriorSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub audit: AuditOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSpec>,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub n: usize,
    pub p: usize,
    /// Working noise scale of the Gaussian linear model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    /// Standard normal design drawn once from the design stream and held fixed.
    #[default]
    Fixed,
    /// Fresh i.i.d. Gaussian rows in every dataset.
    Gaussian,
    /// A column of ones; requires `p = 1`.
    Intercept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    /// Defaults to the model's own response law.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<ResponseLaw>,
    /// Explicit coefficients; otherwise `coef_norm` along the all-ones
    /// direction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coef: Option<Vec<f64>>,
    pub coef_norm: f64,
    pub design: DesignKind,
    pub design_scale: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            response: None,
            coef: None,
            coef_norm: 1.0,
            design: DesignKind::Fixed,
            design_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    Flat,
    /// Centered Gaussian with precision `g^2 I`, or `smallness * D0^2 / p`
    /// when `smallness` is given.
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        smallness: Option<f64>,
    },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Flat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySpec {
    pub r0_normalization: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            r0_normalization: crate::geometry::DEFAULT_R0_NORMALIZATION,
            x_n: None,
            r0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RdSource {
    Fixed,
    #[default]
    FromConditions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BracketingSpec {
    pub rd_source: RdSource,
    /// Required when `rd_source = "fixed"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shell_directions: Option<usize>,
    pub radii: usize,
    pub polish_steps: usize,
}

impl Default for BracketingSpec {
    fn default() -> Self {
        Self {
            rd_source: RdSource::FromConditions,
            rd: None,
            shell_directions: None,
            radii: DEFAULT_RADII,
            polish_steps: POLISH_STEPS,
        }
    }
}

impl BracketingSpec {
    pub fn shell_plan(&self, p: usize, r0: f64) -> ShellPlan {
        let dirs = self.shell_directions.unwrap_or_else(|| ShellPlan::default_direction_count(p));
        let mut plan = ShellPlan::with_sizes(p, r0, dirs, self.radii);
        plan.polish_steps = self.polish_steps;
        plan
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorKind {
    #[default]
    Exact,
    Sampler,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorSpec {
    pub mode: PosteriorKind,
    pub chain: ChainConfig,
    /// Write the first replication's draws to `draws/rep0.bin`.
    pub dump_draws: bool,
}

impl PosteriorSpec {
    pub fn posterior_mode(&self) -> PosteriorMode {
        match self.mode {
            PosteriorKind::Exact => PosteriorMode::Exact,
            PosteriorKind::Sampler => PosteriorMode::Sampler(self.chain),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    pub moments: MomentKind,
    /// Random `lambda` with `|lambda|^2 <= p` for the MGF discrepancy.
    pub mgf_lambdas: usize,
    pub slack: f64,
    /// Deviation levels of the concentration check; levels above `p/2` are skipped.
    pub shell_x: Vec<f64>,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            moments: MomentKind::Full,
            mgf_lambdas: 50,
            slack: crate::metrics::DEFAULT_SLACK,
            shell_x: vec![1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSpec {
    pub alpha: f64,
    pub kind: SetKind,
    pub reps: usize,
}

impl Default for CoverageSpec {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            kind: SetKind::Oracle,
            reps: 2000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Target `p^3 / n` values.
    pub ratios: Vec<f64>,
    /// Dimensions paired with `ratios` by position; a single entry applies
    /// to every ratio.
    pub p: Vec<usize>,
    /// Isotropic prior scales for the prior sweep.
    pub g: Vec<f64>,
    /// Alternative prior sweep axis: `|D0^-1 G^2 D0^-1| p` targets.
    pub smallness: Vec<f64>,
}

fn field_error(field: &str, message: impl Into<String>) -> BvmError {
    BvmError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parse and validate. Syntax and schema errors carry the line and
    /// column of the offending entry.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("line {line}, column {col}")
                }
                None => "<document>".into(),
            };
            field_error(&field, e.message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BvmError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BvmError::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field_error(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.scenario.trim().is_empty() {
            return Err(field_error("scenario", "must be nonempty"));
        }
        if self.reps == 0 {
            return Err(field_error("reps", "must be at least 1"));
        }
        let m = &self.model;
        if m.family == Family::Custom {
            return Err(field_error("model.family", "custom models register through the library, not the config"));
        }
        if m.n == 0 || m.p == 0 {
            return Err(field_error("model", "n and p must be positive"));
        }
        if let Some(s) = m.sigma {
            if m.family != Family::GaussianLinear {
                return Err(field_error("model.sigma", "only the Gaussian linear model has a noise scale"));
            }
            if !(s > 0.0 && s.is_finite()) {
                return Err(field_error("model.sigma", "must be positive"));
            }
        }
        let t = &self.truth;
        if let Some(c) = &t.coef {
            if c.len() != m.p {
                return Err(field_error("truth.coef", format!("has {} entries, model.p = {}", c.len(), m.p)));
            }
        }
        if !(t.coef_norm.is_finite() && t.coef_norm >= 0.0) {
            return Err(field_error("truth.coef_norm", "must be finite and nonnegative"));
        }
        if !(t.design_scale > 0.0) {
            return Err(field_error("truth.design_scale", "must be positive"));
        }
        if t.design == DesignKind::Intercept && m.p != 1 {
            return Err(field_error("truth.design", "an intercept design needs p = 1"));
        }
        if let Some(r) = t.response {
            let ok = match m.family {
                Family::GaussianLinear => matches!(
                    r,
                    ResponseLaw::GaussianNoise { .. } | ResponseLaw::StudentNoise { .. } | ResponseLaw::CauchyNoise { .. }
                ),
                Family::Logistic => matches!(r, ResponseLaw::Bernoulli { .. }),
                Family::Poisson => matches!(r, ResponseLaw::Poisson | ResponseLaw::NegativeBinomial { .. }),
                Family::Custom => false,
            };
            if !ok {
                return Err(field_error("truth.response", format!("{r:?} does not fit the {:?} family", m.family)));
            }
        }
        if let PriorSpec::Gaussian { g, smallness } = &self.prior {
            match (g, smallness) {
                (Some(v), None) | (None, Some(v)) if *v >= 0.0 && v.is_finite() => {}
                (Some(_), Some(_)) => return Err(field_error("prior", "give either g or smallness, not both")),
                _ => return Err(field_error("prior", "a Gaussian prior needs a finite nonnegative g or smallness")),
            }
        }
        let b = &self.bracketing;
        match (b.rd_source, b.rd) {
            (RdSource::Fixed, None) => return Err(field_error("bracketing.rd", "required when rd_source = \"fixed\"")),
            (_, Some(rd)) if !(rd >= 0.0 && rd.is_finite()) => {
                return Err(field_error("bracketing.rd", "must be finite and nonnegative"))
            }
            _ => {}
        }
        if b.radii == 0 || b.shell_directions == Some(0) {
            return Err(field_error("bracketing", "shell plan must be nonempty"));
        }
        if self.posterior.mode == PosteriorKind::Exact && m.family != Family::GaussianLinear {
            return Err(field_error("posterior.mode", "the closed-form posterior needs the Gaussian linear model"));
        }
        self.posterior.chain.validate().map_err(|e| field_error("posterior.chain", e.to_string()))?;
        if self.metrics.mgf_lambdas == 0 {
            return Err(field_error("metrics.mgf_lambdas", "must be at least 1"));
        }
        if self.audit.mc_budget < crate::audit::MIN_MC_BUDGET {
            return Err(field_error(
                "audit.mc_budget",
                format!("must be at least {}", crate::audit::MIN_MC_BUDGET),
            ));
        }
        if let Some(c) = &self.coverage {
            if !(c.alpha > 0.0 && c.alpha < 1.0) {
                return Err(field_error("coverage.alpha", "must lie in (0, 1)"));
            }
            if c.reps < crate::credible::MIN_COVERAGE_REPS {
                return Err(field_error(
                    "coverage.reps",
                    format!("must be at least {}", crate::credible::MIN_COVERAGE_REPS),
                ));
            }
        }
        Ok(())
    }

    /// Working noise scale, defaulting to one.
    pub fn sigma(&self) -> f64 {
        self.model.sigma.unwrap_or(1.0)
    }

    pub fn coef(&self) -> Vec<f64> {
        match &self.truth.coef {
            Some(c) => c.clone(),
            None => vec![self.truth.coef_norm / (self.model.p as f64).sqrt(); self.model.p],
        }
    }

    /// Copy with `(n, p)` replaced. Explicit coefficients must keep their
    /// length.
    pub fn with_dims(&self, n: usize, p: usize) -> Result<Self> {
        let mut c = self.clone();
        c.model.n = n;
        c.model.p = p;
        c.validate()?;
        Ok(c)
    }

    /// Copy with the prior replaced.
    pub fn with_prior(&self, prior: PriorSpec) -> Result<Self> {
        let mut c = self.clone();
        c.prior = prior;
        c.validate()?;
        Ok(c)
    }

    /// Every defaulted field made explicit.
    pub fn resolved(&self, native: ResponseLaw) -> Self {
        let mut c = self.clone();
        if c.model.family == Family::GaussianLinear {
            c.model.sigma = Some(self.sigma());
        }
        c.truth.response = Some(self.truth.response.unwrap_or(native));
        c.truth.coef = Some(self.coef());
        c.geometry.x_n = Some(self.geometry.x_n.unwrap_or(self.model.p as f64));
        c.bracketing.shell_directions = Some(
            self.bracketing
                .shell_directions
                .unwrap_or_else(|| ShellPlan::default_direction_count(self.model.p)),
        );
        c.posterior.chain.burn_in = Some(self.posterior.chain.burn_in());
        c.audit.shell_directions = Some(
            self.audit
                .shell_directions
                .unwrap_or_else(|| ShellPlan::default_direction_count(self.model.p)),
        );
        c.audit.g_max = Some(
            self.audit
                .g_max
                .unwrap_or_else(|| (self.model.p as f64 + c.geometry.x_n.unwrap_or(self.model.p as f64)).sqrt()),
        );
        c
    }
}
