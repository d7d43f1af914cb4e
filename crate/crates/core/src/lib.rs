//! Finite-sample Bernstein-von Mises laboratory.
//!
//! Local geometry of quasi-likelihood models, condition audits, bracketing
//! error budgets, posterior summaries, discrepancy metrics and elliptic
//! credible sets.

pub mod credible;
pub mod error;
pub mod linalg;
pub mod audit;
pub mod bracketing;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optimize;
pub mod posterior;
pub mod prior;
pub mod quadrature;
pub mod rng;
pub mod sampling;
pub mod serde_util;
pub mod special;

pub use error::{BvmError, Result};
pub use linalg::{Matrix, Vector};
pub use rng::RngStream;
