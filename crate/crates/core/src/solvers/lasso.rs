//! Weighted-penalty Lasso by cyclic coordinate descent with covariance
//! updates.
//!
//! Objective: `(1/n) ||s - A b||^2 + lambda * sum_j w_j |b_j|`.
//!
//! Coordinates with weight zero are left unpenalized. The solver keeps the
//! scaled gradient `g = A'(s - A b)/n` up to date after every coordinate
//! move, so one sweep costs `O(m * changed)` after the Gram matrix is built.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone)]
pub struct LassoProblem<'a> {
    pub a: &'a DMatrix<f64>,
    pub s: &'a DVector<f64>,
    pub penalty_weights: Vec<f64>,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: Option<DVector<f64>>,
    /// Record the objective after every sweep.
    pub track_objective: bool,
}

impl<'a> LassoProblem<'a> {
    pub fn new(a: &'a DMatrix<f64>, s: &'a DVector<f64>, lambda: f64) -> Self {
        LassoProblem {
            a,
            s,
            penalty_weights: vec![1.0; a.ncols()],
            lambda,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            warm_start: None,
            track_objective: false,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.penalty_weights = weights;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_warm_start(mut self, coef: DVector<f64>) -> Self {
        self.warm_start = Some(coef);
        self
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = self.a.shape();
        if self.s.len() != n {
            return Err(Error::DimensionMismatch(format!("design has {n} rows, response {}", self.s.len())));
        }
        if self.penalty_weights.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{m} columns but {} penalty weights",
                self.penalty_weights.len()
            )));
        }
        if self.penalty_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidProblem("penalty weights must be finite and non-negative".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidProblem(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidProblem("tol and max_iter must be positive".into()));
        }
        if let Some(w) = &self.warm_start {
            if w.len() != m {
                return Err(Error::DimensionMismatch("warm start length".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub coef: DVector<f64>,
    /// Number of coordinate sweeps performed.
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
}

/// Sufficient statistics of a least-squares problem in covariance form.
#[derive(Debug, Clone)]
pub struct CovarianceForm {
    pub gram: DMatrix<f64>,
    pub cross: DVector<f64>,
    pub sty: f64,
}

impl CovarianceForm {
    pub fn from_design(a: &DMatrix<f64>, s: &DVector<f64>) -> Self {
        let n = a.nrows() as f64;
        CovarianceForm { gram: a.tr_mul(a) / n, cross: a.tr_mul(s) / n, sty: s.dot(s) / n }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub fn objective(a: &DMatrix<f64>, s: &DVector<f64>, coef: &DVector<f64>, weights: &[f64], lambda: f64) -> f64 {
    let r = s - a * coef;
    r.norm_squared() / a.nrows() as f64 + lambda * penalty(coef, weights)
}

fn penalty(coef: &DVector<f64>, weights: &[f64]) -> f64 {
    coef.iter().zip(weights).map(|(b, w)| w * b.abs()).sum()
}

/// Largest KKT violation of `coef`, recomputed from the raw design.
pub fn kkt_violation(a: &DMatrix<f64>, s: &DVector<f64>, coef: &DVector<f64>, weights: &[f64], lambda: f64) -> f64 {
    let n = a.nrows() as f64;
    let grad = a.tr_mul(&(s - a * coef)) * (2.0 / n);
    kkt_from_gradient(&grad, coef, weights, lambda)
}

fn kkt_from_gradient(grad: &DVector<f64>, coef: &DVector<f64>, weights: &[f64], lambda: f64) -> f64 {
    grad.iter()
        .zip(coef.iter())
        .zip(weights)
        .map(|((&g, &b), &w)| {
            let t = lambda * w;
            if t == 0.0 {
                g.abs()
            } else if b == 0.0 {
                (g.abs() - t).max(0.0)
            } else {
                (g - t * b.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

pub fn lasso_solve(problem: &LassoProblem<'_>) -> Result<LassoSolution> {
    problem.validate()?;
    let cov = CovarianceForm::from_design(problem.a, problem.s);
    lasso_solve_covariance(&cov, problem)
}

/// Solves the problem given precomputed covariance statistics; `problem.a`
/// and `problem.s` only supply dimensions here.
pub fn lasso_solve_covariance(cov: &CovarianceForm, problem: &LassoProblem<'_>) -> Result<LassoSolution> {
    problem.validate()?;
    let m = cov.gram.ncols();
    let weights = &problem.penalty_weights;
    let half_pen: Vec<f64> = weights.iter().map(|w| 0.5 * problem.lambda * w).collect();
    let diag: Vec<f64> = (0..m).map(|j| cov.gram[(j, j)]).collect();

    let mut coef = problem.warm_start.clone().unwrap_or_else(|| DVector::zeros(m));
    for j in 0..m {
        if diag[j] <= 0.0 {
            coef[j] = 0.0;
        }
    }
    let mut grad = &cov.cross - &cov.gram * &coef;

    let obj = |coef: &DVector<f64>, grad: &DVector<f64>| {
        cov.sty - cov.cross.dot(coef) - grad.dot(coef) + problem.lambda * penalty(coef, weights)
    };
    let mut trace = Vec::new();
    if problem.track_objective {
        trace.push(obj(&coef, &grad));
    }

    let sweep = |coef: &mut DVector<f64>, grad: &mut DVector<f64>, active_only: bool| -> f64 {
        let mut max_change: f64 = 0.0;
        for j in 0..m {
            if diag[j] <= 0.0 || (active_only && coef[j] == 0.0) {
                continue;
            }
            let old = coef[j];
            let rho = grad[j] + diag[j] * old;
            let new = soft_threshold(rho, half_pen[j]) / diag[j];
            let delta = new - old;
            if delta != 0.0 {
                coef[j] = new;
                grad.axpy(-delta, &cov.gram.column(j), 1.0);
                max_change = max_change.max(delta.abs() * diag[j].sqrt());
            }
        }
        max_change
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < problem.max_iter {
        let change = sweep(&mut coef, &mut grad, false);
        iterations += 1;
        if problem.track_objective {
            trace.push(obj(&coef, &grad));
        }
        if change < problem.tol {
            // refresh the running gradient before certifying
            grad = &cov.cross - &cov.gram * &coef;
            if kkt_from_gradient(&(&grad * 2.0), &coef, weights, problem.lambda) <= problem.tol {
                converged = true;
                break;
            }
            continue;
        }
        while iterations < problem.max_iter {
            let change = sweep(&mut coef, &mut grad, true);
            iterations += 1;
            if problem.track_objective {
                trace.push(obj(&coef, &grad));
            }
            if change < problem.tol {
                break;
            }
        }
    }
    if !converged {
        log::warn!("event=lasso_not_converged sweeps={iterations} lambda={}", problem.lambda);
    }
    let objective = obj(&coef, &grad);
    Ok(LassoSolution { coef, iterations, converged, objective, objective_trace: trace })
}

/// Solves along a decreasing sequence of penalties, warm-starting each
/// solve from the previous solution.
pub fn lasso_path(problem: &LassoProblem<'_>, lambdas: &[f64]) -> Result<Vec<LassoSolution>> {
    problem.validate()?;
    let cov = CovarianceForm::from_design(problem.a, problem.s);
    let mut out = Vec::with_capacity(lambdas.len());
    let mut warm = problem.warm_start.clone();
    for &lambda in lambdas {
        let mut p = problem.clone();
        p.lambda = lambda;
        p.warm_start = warm.take();
        let sol = lasso_solve_covariance(&cov, &p)?;
        warm = Some(sol.coef.clone());
        out.push(sol);
    }
    Ok(out)
}
