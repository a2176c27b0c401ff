//! Penalized optimization kernels.

pub mod dantzig;
pub mod lasso;

pub use dantzig::{constraint_violation, dantzig_solve, DantzigProblem, DantzigSolution};
pub use lasso::{kkt_violation, lasso_path, lasso_solve, CovarianceForm, LassoProblem, LassoSolution};
