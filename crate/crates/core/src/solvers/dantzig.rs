//! Minimum l1-norm solutions under an l-infinity moment constraint:
//!
//! ```text
//! minimize ||w||_1  subject to  ||target + G w||_inf <= bound
//! ```
//!
//! The problem is written as an LP in `w = u - v` with `u, v >= 0` and
//! boxed row slacks `s = target + G (u - v)`, `-bound <= s <= bound`.
//! Starting from the all-slack basis (`w = 0`) every reduced cost equals
//! one, so the start is dual feasible and a bounded dual simplex only has
//! to repair the rows where `|target_i| > bound`. Solutions are sparse, so
//! the number of pivots is small compared with the dimension.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Bound multiplier applied when the constraint set is empty.
pub const ESCALATION_FACTOR: f64 = 1.5;
pub const MAX_ESCALATIONS: usize = 10;

#[derive(Debug, Clone)]
pub struct DantzigProblem<'a> {
    pub gram: &'a DMatrix<f64>,
    pub target: &'a DVector<f64>,
    pub bound: f64,
}

impl DantzigProblem<'_> {
    fn validate(&self) -> Result<()> {
        let m = self.gram.nrows();
        if self.gram.ncols() != m || self.target.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "gram is {}x{}, target has {}",
                m,
                self.gram.ncols(),
                self.target.len()
            )));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::InvalidProblem(format!("bound must be positive, got {}", self.bound)));
        }
        let scale = self.gram.amax().max(1.0);
        for i in 0..m {
            for j in 0..i {
                if (self.gram[(i, j)] - self.gram[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidProblem("gram matrix is not symmetric".into()));
                }
            }
        }
        if self.gram.iter().chain(self.target.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DantzigSolution {
    pub w: DVector<f64>,
    /// Bound actually enforced (larger than requested after escalation).
    pub bound: f64,
    pub escalations: usize,
    pub pivots: usize,
}

/// `||target + gram * w||_inf`.
pub fn constraint_violation(gram: &DMatrix<f64>, target: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (target + gram * w).amax()
}

/// Solves the problem, multiplying the bound by [`ESCALATION_FACTOR`] up to
/// [`MAX_ESCALATIONS`] times when it is infeasible.
pub fn dantzig_solve(problem: &DantzigProblem<'_>) -> Result<DantzigSolution> {
    problem.validate()?;
    let mut bound = problem.bound;
    for escalations in 0..=MAX_ESCALATIONS {
        match solve_at_bound(problem.gram, problem.target, bound) {
            Ok((w, pivots)) => return Ok(DantzigSolution { w, bound, escalations, pivots }),
            Err(Error::Infeasible { .. }) if escalations < MAX_ESCALATIONS => {
                log::warn!(
                    "event=dantzig_bound_escalation bound={bound:.6e} next={:.6e}",
                    bound * ESCALATION_FACTOR
                );
                bound *= ESCALATION_FACTOR;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Infeasible { bound })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    Pos(usize),
    Neg(usize),
    Slack(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SlackState {
    Basic,
    AtLower,
    AtUpper,
}

/// Dense tableau for the bounded dual simplex. Only the `u` and slack
/// columns are stored; the `v` column of coordinate `j` is the negated `u`
/// column at every basis.
struct Tableau {
    m: usize,
    /// Row-major `m x 2m`: columns `0..m` are `u_j`, `m..2m` are slacks.
    t: Vec<f64>,
    rhs: Vec<f64>,
    /// Reduced costs of the stored columns.
    d: Vec<f64>,
    basis: Vec<Var>,
    slack_state: Vec<SlackState>,
    bound: f64,
}

impl Tableau {
    fn new(gram: &DMatrix<f64>, target: &DVector<f64>, bound: f64) -> Self {
        let m = gram.nrows();
        let w = 2 * m;
        let mut t = vec![0.0; m * w];
        for i in 0..m {
            for j in 0..m {
                t[i * w + j] = -gram[(i, j)];
            }
            t[i * w + m + i] = 1.0;
        }
        let mut d = vec![1.0; w];
        d[m..].fill(0.0);
        Tableau {
            m,
            t,
            rhs: target.iter().copied().collect(),
            d,
            basis: (0..m).map(Var::Slack).collect(),
            slack_state: vec![SlackState::Basic; m],
            bound,
        }
    }

    fn width(&self) -> usize {
        2 * self.m
    }

    fn slack_value(&self, i: usize) -> f64 {
        match self.slack_state[i] {
            SlackState::AtLower => -self.bound,
            SlackState::AtUpper => self.bound,
            SlackState::Basic => 0.0,
        }
    }

    /// Current values of the basic variables.
    fn basic_values(&self) -> Vec<f64> {
        let w = self.width();
        let mut x = self.rhs.clone();
        for k in 0..self.m {
            let v = self.slack_value(k);
            if self.slack_state[k] != SlackState::Basic && v != 0.0 {
                let col = self.m + k;
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi -= self.t[i * w + col] * v;
                }
            }
        }
        x
    }

    fn bounds_of(&self, var: Var) -> (f64, f64) {
        match var {
            Var::Pos(_) | Var::Neg(_) => (0.0, f64::INFINITY),
            Var::Slack(_) => (-self.bound, self.bound),
        }
    }

    fn column_entry(&self, row: usize, var: Var) -> f64 {
        let w = self.width();
        match var {
            Var::Pos(j) => self.t[row * w + j],
            Var::Neg(j) => -self.t[row * w + j],
            Var::Slack(k) => self.t[row * w + self.m + k],
        }
    }

    fn reduced_cost(&self, var: Var) -> f64 {
        match var {
            Var::Pos(j) => self.d[j],
            Var::Neg(j) => 2.0 - self.d[j],
            Var::Slack(k) => self.d[self.m + k],
        }
    }

    fn is_basic(&self, var: Var) -> bool {
        match var {
            Var::Slack(k) => self.slack_state[k] == SlackState::Basic,
            _ => self.basis.contains(&var),
        }
    }

    fn pivot(&mut self, row: usize, entering: Var) {
        let w = self.width();
        let m = self.m;
        let col: Vec<f64> = (0..m).map(|i| self.column_entry(i, entering)).collect();
        let alpha = col[row];
        let dq = self.reduced_cost(entering);

        let pivot_row: Vec<f64> = self.t[row * w..(row + 1) * w].iter().map(|v| v / alpha).collect();
        let rhs_r = self.rhs[row] / alpha;
        for i in 0..m {
            if i == row {
                continue;
            }
            let f = col[i];
            if f == 0.0 {
                continue;
            }
            let r = &mut self.t[i * w..(i + 1) * w];
            for (x, p) in r.iter_mut().zip(&pivot_row) {
                *x -= f * p;
            }
            self.rhs[i] -= f * rhs_r;
        }
        self.t[row * w..(row + 1) * w].copy_from_slice(&pivot_row);
        self.rhs[row] = rhs_r;
        if dq != 0.0 {
            for (dk, p) in self.d.iter_mut().zip(&pivot_row) {
                *dk -= dq * p;
            }
        }
        // pin the entering column's own entries against rounding
        match entering {
            Var::Pos(j) => self.d[j] = 0.0,
            Var::Neg(j) => self.d[j] = 2.0,
            Var::Slack(k) => self.d[m + k] = 0.0,
        }
        if let Var::Slack(k) = entering {
            self.slack_state[k] = SlackState::Basic;
        }
        self.basis[row] = entering;
    }
}

const PRIMAL_TOL_REL: f64 = 1e-10;
const DUAL_TOL: f64 = 1e-10;

fn solve_at_bound(gram: &DMatrix<f64>, target: &DVector<f64>, bound: f64) -> Result<(DVector<f64>, usize)> {
    let m = gram.nrows();
    if target.amax() <= bound {
        return Ok((DVector::zeros(m), 0));
    }
    let mut tab = Tableau::new(gram, target, bound);
    let primal_tol = PRIMAL_TOL_REL * bound;
    let pivot_tol = 1e-11 * gram.amax().max(1.0);
    let max_pivots = 50 * m + 1000;

    let mut pivots = 0;
    loop {
        let x = tab.basic_values();
        // leaving row: largest bound violation
        let mut leave: Option<(usize, f64, f64)> = None;
        let mut worst = primal_tol;
        for (r, &xr) in x.iter().enumerate() {
            let (lo, hi) = tab.bounds_of(tab.basis[r]);
            let (viol, target_bound) = if xr < lo { (lo - xr, lo) } else if xr > hi { (xr - hi, hi) } else { (0.0, 0.0) };
            if viol > worst {
                worst = viol;
                leave = Some((r, xr, target_bound));
            }
        }
        let Some((r, xr, leave_to)) = leave else {
            break;
        };
        if pivots >= max_pivots {
            return Err(Error::NotConverged(format!("dual simplex exceeded {max_pivots} pivots")));
        }
        let increase = xr < leave_to;

        // Harris two-pass ratio test over nonbasic candidates
        let mut candidates: Vec<(Var, f64, f64)> = Vec::new();
        let consider = |var: Var, at_upper: bool, out: &mut Vec<(Var, f64, f64)>| {
            let alpha = tab.column_entry(r, var);
            if alpha.abs() <= pivot_tol {
                return;
            }
            // moving the candidate off its bound must push x_r towards leave_to
            let eligible = match (increase, at_upper) {
                (true, false) => alpha < 0.0,
                (true, true) => alpha > 0.0,
                (false, false) => alpha > 0.0,
                (false, true) => alpha < 0.0,
            };
            if eligible {
                out.push((var, tab.reduced_cost(var).abs(), alpha));
            }
        };
        for j in 0..m {
            for var in [Var::Pos(j), Var::Neg(j)] {
                if !tab.is_basic(var) {
                    consider(var, false, &mut candidates);
                }
            }
        }
        for k in 0..m {
            match tab.slack_state[k] {
                SlackState::Basic => {}
                SlackState::AtLower => consider(Var::Slack(k), false, &mut candidates),
                SlackState::AtUpper => consider(Var::Slack(k), true, &mut candidates),
            }
        }
        if candidates.is_empty() {
            return Err(Error::Infeasible { bound });
        }
        let theta_max = candidates
            .iter()
            .map(|(_, d, a)| (d + DUAL_TOL) / a.abs())
            .fold(f64::INFINITY, f64::min);
        let (entering, _, _) = candidates
            .iter()
            .filter(|(_, d, a)| d / a.abs() <= theta_max)
            .max_by(|a, b| a.2.abs().total_cmp(&b.2.abs()))
            .copied()
            .expect("the minimizing candidate passes its own threshold");

        let leaving = tab.basis[r];
        tab.pivot(r, entering);
        if let Var::Slack(k) = leaving {
            tab.slack_state[k] = if increase { SlackState::AtLower } else { SlackState::AtUpper };
        }
        pivots += 1;
    }

    let w = refine(&tab, gram, target)?;
    Ok((w, pivots))
}

/// Recomputes the final vertex from the active rows: each structural basic
/// coordinate is pinned down by a slack that sits at one of its bounds.
fn refine(tab: &Tableau, gram: &DMatrix<f64>, target: &DVector<f64>) -> Result<DVector<f64>> {
    let m = tab.m;
    let cols: Vec<usize> = tab
        .basis
        .iter()
        .filter_map(|v| match v {
            Var::Pos(j) | Var::Neg(j) => Some(*j),
            Var::Slack(_) => None,
        })
        .collect();
    let rows: Vec<usize> = (0..m).filter(|&k| tab.slack_state[k] != SlackState::Basic).collect();
    let mut w = DVector::zeros(m);
    if cols.is_empty() {
        return Ok(w);
    }
    if rows.len() != cols.len() {
        return Err(Error::NotConverged("inconsistent final basis".into()));
    }
    let k = cols.len();
    let sub = DMatrix::from_fn(k, k, |a, b| gram[(rows[a], cols[b])]);
    let rhs = DVector::from_fn(k, |a, _| tab.slack_value(rows[a]) - target[rows[a]]);
    let sol = sub.lu().solve(&rhs);
    match sol {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => {
            for (a, &j) in cols.iter().enumerate() {
                w[j] = sol[a];
            }
        }
        _ => {
            // fall back on the tableau values
            let x = tab.basic_values();
            for (r, var) in tab.basis.iter().enumerate() {
                match var {
                    Var::Pos(j) => w[*j] = x[r],
                    Var::Neg(j) => w[*j] = -x[r],
                    Var::Slack(_) => {}
                }
            }
        }
    }
    Ok(w)
}
