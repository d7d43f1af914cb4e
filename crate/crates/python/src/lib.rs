//! Python bindings. Experiment entry points take TOML config text and return
//! the report as a dict; the heavy work runs with the GIL released.

use std::path::PathBuf;

use bvm_core::harness::{
    audit_experiment, run_experiment, sweep_critical_dimension, sweep_gaussian_prior, ExperimentConfig, PriorAxis,
};
use bvm_core::metrics::gaussian_kl_tv;
use bvm_core::{BvmError, Matrix, Vector};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: BvmError) -> PyErr {
    match e {
        BvmError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse(config: &str, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_toml_str(config).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Runs `f` without the GIL on a pool of `threads` workers.
fn compute<T: Send>(py: Python<'_>, threads: Option<usize>, f: impl FnOnce() -> Result<T, BvmError> + Send) -> PyResult<T> {
    py.detach(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = threads {
            b = b.num_threads(t.max(1));
        }
        let pool = b.build().map_err(|e| PyValueError::new_err(e.to_string()))?;
        pool.install(f).map_err(py_err)
    })
}

/// Resolved config with every default filled in, as TOML text.
#[pyfunction]
fn resolve_config(config: &str) -> PyResult<String> {
    parse(config, None)?.to_toml_string().map_err(py_err)
}

/// Full pipeline for one configuration. Writes the report files when `out`
/// is given.
#[pyfunction]
#[pyo3(signature = (config, seed=None, reps=None, threads=None, out=None))]
fn run<'py>(
    py: Python<'py>,
    config: &str,
    seed: Option<u64>,
    reps: Option<usize>,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = parse(config, seed)?;
    if let Some(r) = reps {
        cfg.reps = r;
    }
    let report = compute(py, threads, || {
        let r = run_experiment(&cfg)?;
        if let Some(dir) = &out {
            r.emit(dir)?;
        }
        Ok(r)
    })?;
    to_dict(py, &report)
}

#[pyfunction]
#[pyo3(signature = (config, seed=None, threads=None, out=None))]
fn audit<'py>(
    py: Python<'py>,
    config: &str,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse(config, seed)?;
    let report = compute(py, threads, || {
        let r = audit_experiment(&cfg)?;
        if let Some(dir) = &out {
            r.emit(dir)?;
        }
        Ok(r)
    })?;
    to_dict(py, &report)
}

/// Critical-dimension sweep; `p` pairs with `ratios` by position or is a
/// single shared dimension.
#[pyfunction]
#[pyo3(signature = (config, ratios, reps, p=None, seed=None, threads=None, out=None))]
#[allow(clippy::too_many_arguments)]
fn sweep_critical<'py>(
    py: Python<'py>,
    config: &str,
    ratios: Vec<f64>,
    reps: usize,
    p: Option<Vec<usize>>,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = parse(config, seed)?;
    if let Some(p) = p {
        cfg.sweep.p = p;
    }
    let report = compute(py, threads, || {
        let r = sweep_critical_dimension(&cfg, &ratios, reps)?;
        if let Some(dir) = &out {
            r.emit(dir)?;
        }
        Ok(r)
    })?;
    to_dict(py, &report)
}

/// Paired flat and Gaussian-prior runs over isotropic scales `g` or
/// smallness targets, exactly one of which must be given.
#[pyfunction]
#[pyo3(signature = (config, reps, g=None, smallness=None, seed=None, threads=None, out=None))]
#[allow(clippy::too_many_arguments)]
fn sweep_prior<'py>(
    py: Python<'py>,
    config: &str,
    reps: usize,
    g: Option<Vec<f64>>,
    smallness: Option<Vec<f64>>,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse(config, seed)?;
    let (axis, values) = match (g, smallness) {
        (Some(g), None) => (PriorAxis::Scale, g),
        (None, Some(s)) => (PriorAxis::Smallness, s),
        _ => return Err(PyValueError::new_err("give exactly one of g or smallness")),
    };
    let report = compute(py, threads, || {
        let r = sweep_gaussian_prior(&cfg, axis, &values, reps)?;
        if let Some(dir) = &out {
            r.emit(dir)?;
        }
        Ok(r)
    })?;
    to_dict(py, &report)
}

/// `(kl, sqrt(kl / 2), KL bound or None)` for `KL(N(0, I), N(delta, B^-1))`.
#[pyfunction]
#[pyo3(signature = (b, delta, rd=None))]
fn gaussian_kl(b: Vec<Vec<f64>>, delta: Vec<f64>, rd: Option<f64>) -> PyResult<(f64, f64, Option<f64>)> {
    let p = delta.len();
    if b.len() != p || b.iter().any(|row| row.len() != p) {
        return Err(PyValueError::new_err("b must be a square matrix matching delta"));
    }
    let m = Matrix::from_fn(p, p, |i, j| b[i][j]);
    let g = gaussian_kl_tv(&m, &Vector::from_vec(delta), rd).map_err(py_err)?;
    Ok((g.kl, g.tv_bound, g.kl_bound))
}

/// Upper `alpha` quantile of the chi-square law with `p` degrees of freedom.
#[pyfunction]
fn chi2_quantile(p: usize, alpha: f64) -> PyResult<f64> {
    if p == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(PyValueError::new_err("need p >= 1 and alpha in (0, 1)"));
    }
    Ok(bvm_core::special::chi2_quantile(p, alpha))
}

#[pymodule]
fn bvmlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("SCHEMA_VERSION", bvm_core::harness::SCHEMA_VERSION)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_critical, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_prior, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_quantile, m)?)?;
    Ok(())
}
