use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bvm_core::harness::{
    audit_experiment, run_experiment, sweep_critical_dimension, sweep_gaussian_prior, ExperimentConfig, PriorAxis,
    EXIT_ERROR,
};
use clap::{Args, Parser, Subcommand};

/// Finite-sample Bernstein-von Mises experiments.
#[derive(Parser)]
#[command(name = "bvmlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "BVMLAB_THREADS")]
    threads: Option<usize>,
    /// Output directory; defaults to `out/<scenario>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline for one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        /// Override the replication count.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Critical-dimension sweep over target p^3/n ratios.
    SweepCritical {
        #[command(flatten)]
        common: Common,
        /// Target ratios; defaults to `sweep.ratios` in the config.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        ratios: Vec<f64>,
        /// Dimensions paired with the ratios; defaults to `sweep.p`.
        #[arg(long = "p", value_delimiter = ',', num_args = 1..)]
        dims: Vec<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Paired flat and Gaussian-prior runs.
    SweepPrior {
        #[command(flatten)]
        common: Common,
        /// Isotropic prior scales.
        #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with = "smallness")]
        g: Vec<f64>,
        /// Targets for |D0^-1 G^2 D0^-1| p.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        smallness: Vec<f64>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Condition audit only.
    Audit {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::from_path(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| Path::new("out").join(&cfg.scenario));
    Ok((cfg, out))
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        b = b.num_threads(t);
    }
    Ok(b.build()?)
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { common, reps } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(r) = reps {
                cfg.reps = r;
            }
            let report = pool(common.threads)?.install(|| run_experiment(&cfg))?;
            report.emit(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(report.exit_code)
        }
        Command::SweepCritical {
            common,
            ratios,
            dims,
            reps,
        } => {
            let (mut cfg, out) = load(&common)?;
            let ratios = if ratios.is_empty() { cfg.sweep.ratios.clone() } else { ratios };
            if !dims.is_empty() {
                cfg.sweep.p = dims;
            }
            let reps = reps.unwrap_or(cfg.reps);
            let report = pool(common.threads)?.install(|| sweep_critical_dimension(&cfg, &ratios, reps))?;
            report.emit(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(report.exit_code)
        }
        Command::SweepPrior {
            common,
            g,
            smallness,
            reps,
        } => {
            let (cfg, out) = load(&common)?;
            let (axis, values) = match (g.is_empty(), smallness.is_empty()) {
                (false, _) => (PriorAxis::Scale, g),
                (true, false) => (PriorAxis::Smallness, smallness),
                (true, true) if !cfg.sweep.g.is_empty() => (PriorAxis::Scale, cfg.sweep.g.clone()),
                (true, true) => (PriorAxis::Smallness, cfg.sweep.smallness.clone()),
            };
            let reps = reps.unwrap_or(cfg.reps);
            let report = pool(common.threads)?.install(|| sweep_gaussian_prior(&cfg, axis, &values, reps))?;
            report.emit(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(report.exit_code)
        }
        Command::Audit { common } => {
            let (cfg, out) = load(&common)?;
            let report = pool(common.threads)?.install(|| audit_experiment(&cfg))?;
            report.emit(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(report.exit_code)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
