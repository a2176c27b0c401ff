//! Doubly robust difference-in-differences for heterogeneous effects on the
//! treated with high-dimensional covariates.
//!
//! The conditional effect is modelled as `x'beta + f(z)`: a sparse linear
//! part in many covariates plus a smooth function of one covariate. The
//! pipeline is
//!
//! 1. [`nuisance::cross_fit`] for out-of-fold propensity and outcome-trend
//!    regressions,
//! 2. [`estimator::pseudo_outcome`] for the doubly robust transformed outcome,
//! 3. [`estimator::fit`] for the penalized partially linear second stage,
//! 4. [`inference::debias_beta`] / [`inference::debias_f`] for confidence
//!    intervals of linear functionals of `beta` and of `f(z)`.
//!
//! [`sim`] generates the two benchmark designs and runs Monte Carlo studies.

pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod linalg;
pub mod logistic;
pub mod nuisance;
pub mod pipeline;
pub mod sieve;
pub mod sim;
pub mod solvers;

pub use data::{load_csv, validate_overlap, write_csv, ColumnSchema, OverlapDiagnostics, Sample, TruthInfo};
pub use error::{Error, Result};
pub use estimator::{fit, fit_semidid, predict_att, pseudo_outcome, DrDidFit, FitOptions, PseudoOutcome, SemiDidFit};
pub use inference::{debias_beta, debias_f, BetaInference, FInference};
pub use nuisance::{cross_fit, LearnerKind, LearnerSpec, NuisanceFit};
pub use sieve::{build_basis, eval_basis, BasisSpec, ProjectionCache};

/// Crate version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
