//! Logistic regression: l1-penalized fits for propensity learners and the
//! unpenalized maximum-likelihood fit used by the semiparametric baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Linear predictor beyond which a fit is treated as separating the classes.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coef: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Perfect or quasi-perfect separation was detected; probabilities
    /// from this fit must be clipped before use.
    pub separated: bool,
}

impl LogisticFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let eta = x * &self.coef;
        eta.map(|e| sigmoid(e + self.intercept))
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn check_classes(d: &[bool], n: usize) -> Result<()> {
    if d.len() != n {
        return Err(Error::DimensionMismatch(format!("x has {n} rows, d has {}", d.len())));
    }
    let ones = d.iter().filter(|&&v| v).count();
    if ones == 0 || ones == n {
        return Err(Error::InvalidProblem("logistic fit needs both classes".into()));
    }
    Ok(())
}

/// Average negative log-likelihood plus `lambda * ||coef||_1`.
pub fn penalized_objective(x: &DMatrix<f64>, d: &[bool], fit: &LogisticFit, lambda: f64) -> f64 {
    let eta = x * &fit.coef;
    let nll: f64 = eta
        .iter()
        .zip(d)
        .map(|(&e, &y)| {
            let e = e + fit.intercept;
            // log(1 + exp(e)) - y e, evaluated stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            softplus - if y { e } else { 0.0 }
        })
        .sum();
    nll / x.nrows() as f64 + lambda * fit.coef.lp_norm(1)
}

/// Maximizes the average Bernoulli log-likelihood minus `lambda ||theta||_1`
/// with an unpenalized intercept.
///
/// Coordinate descent on the quadratic majorizer: the curvature of the
/// average log-loss along coordinate `j` never exceeds `mean(x_j^2) / 4`,
/// so each coordinate step decreases the objective.
pub fn fit_l1_logistic(x: &DMatrix<f64>, d: &[bool], lambda: f64) -> Result<LogisticFit> {
    fit_l1_logistic_with(x, d, lambda, 1e-7, 100_000)
}

pub fn fit_l1_logistic_with(x: &DMatrix<f64>, d: &[bool], lambda: f64, tol: f64, max_sweeps: usize) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    check_classes(d, n)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidProblem("lambda must be non-negative".into()));
    }
    let nf = n as f64;
    let y: Vec<f64> = d.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let ybar = y.iter().sum::<f64>() / nf;
    let curv: Vec<f64> = x.column_iter().map(|c| c.norm_squared() / (4.0 * nf)).collect();

    let mut intercept = (ybar / (1.0 - ybar)).ln();
    let mut coef = DVector::zeros(p);
    let mut eta = DVector::from_element(n, intercept);
    let mut prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();

    // gradient of the average log-loss along column j (None = intercept)
    let grad = |col: Option<usize>, prob: &[f64]| -> f64 {
        match col {
            None => prob.iter().zip(&y).map(|(p, y)| p - y).sum::<f64>() / nf,
            Some(j) => x.column(j).iter().zip(prob.iter().zip(&y)).map(|(xv, (p, y))| xv * (p - y)).sum::<f64>() / nf,
        }
    };

    let sweep = |coef: &mut DVector<f64>,
                     intercept: &mut f64,
                     eta: &mut DVector<f64>,
                     prob: &mut Vec<f64>,
                     active_only: bool|
     -> f64 {
        let mut max_change: f64 = 0.0;
        // intercept: curvature bound 1/4
        let step = -4.0 * grad(None, prob);
        if step != 0.0 {
            *intercept += step;
            for (e, p) in eta.iter_mut().zip(prob.iter_mut()) {
                *e += step;
                *p = sigmoid(*e);
            }
            max_change = max_change.max(step.abs() * 0.5);
        }
        for j in 0..p {
            if curv[j] <= 0.0 || (active_only && coef[j] == 0.0) {
                continue;
            }
            let g = grad(Some(j), prob);
            let old = coef[j];
            let z = old - g / curv[j];
            let t = lambda / curv[j];
            let new = if z > t { z - t } else if z < -t { z + t } else { 0.0 };
            let delta = new - old;
            if delta != 0.0 {
                coef[j] = new;
                for (i, (e, pr)) in eta.iter_mut().zip(prob.iter_mut()).enumerate() {
                    *e += delta * x[(i, j)];
                    *pr = sigmoid(*e);
                }
                max_change = max_change.max(delta.abs() * (4.0 * curv[j]).sqrt());
            }
        }
        max_change
    };

    let change_tol = 0.1 * tol;
    let mut separated = false;
    let mut sweeps = 0;
    let mut converged = false;
    'outer: while sweeps < max_sweeps {
        let change = sweep(&mut coef, &mut intercept, &mut eta, &mut prob, false);
        sweeps += 1;
        if eta.amax() > SEPARATION_ETA {
            separated = true;
            break;
        }
        if change < change_tol {
            if kkt_violation_inner(x, &prob, &y, &coef, lambda) <= tol {
                converged = true;
                break;
            }
            continue;
        }
        while sweeps < max_sweeps {
            let change = sweep(&mut coef, &mut intercept, &mut eta, &mut prob, true);
            sweeps += 1;
            if eta.amax() > SEPARATION_ETA {
                separated = true;
                break 'outer;
            }
            if change < change_tol {
                break;
            }
        }
    }
    if separated {
        log::warn!("event=logistic_separation lambda={lambda} sweeps={sweeps}");
    }
    Ok(LogisticFit { intercept, coef, iterations: sweeps, converged, separated })
}

fn kkt_violation_inner(x: &DMatrix<f64>, prob: &[f64], y: &[f64], coef: &DVector<f64>, lambda: f64) -> f64 {
    let n = x.nrows() as f64;
    let r: DVector<f64> = DVector::from_iterator(prob.len(), prob.iter().zip(y).map(|(p, y)| p - y));
    let g0 = r.sum() / n;
    let g = x.tr_mul(&r) / n;
    let mut worst = g0.abs();
    for (gj, bj) in g.iter().zip(coef.iter()) {
        let v = if *bj == 0.0 { (gj.abs() - lambda).max(0.0) } else { (gj + lambda * bj.signum()).abs() };
        worst = worst.max(v);
    }
    worst
}

/// KKT violation of a penalized logistic fit, recomputed from scratch.
pub fn logistic_kkt_violation(x: &DMatrix<f64>, d: &[bool], fit: &LogisticFit, lambda: f64) -> f64 {
    let prob = fit.predict(x);
    let y: Vec<f64> = d.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    kkt_violation_inner(x, prob.as_slice(), &y, &fit.coef, lambda)
}

/// Unpenalized maximum likelihood by Newton-Raphson with step halving.
pub fn fit_logistic_mle(x: &DMatrix<f64>, d: &[bool]) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    check_classes(d, n)?;
    let mut design = DMatrix::from_element(n, p + 1, 1.0);
    design.view_mut((0, 1), (n, p)).copy_from(x);
    let y = DVector::from_iterator(n, d.iter().map(|&v| if v { 1.0 } else { 0.0 }));

    let loglik = |theta: &DVector<f64>| -> f64 {
        let eta = &design * theta;
        eta.iter()
            .zip(y.iter())
            .map(|(&e, &yy)| {
                let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                yy * e - softplus
            })
            .sum()
    };

    let mut theta = DVector::zeros(p + 1);
    let ybar = y.mean();
    theta[0] = (ybar / (1.0 - ybar)).ln();
    let mut ll = loglik(&theta);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let eta = &design * &theta;
        let prob = eta.map(sigmoid);
        let w = prob.map(|p| (p * (1.0 - p)).max(1e-12));
        let score = design.tr_mul(&(&y - &prob));
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let info = design.tr_mul(&weighted);
        let Some(step) = info.clone().cholesky().map(|c| c.solve(&score)).or_else(|| info.full_piv_lu().solve(&score)) else {
            separated = true;
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &theta + &step * t;
            let cll = loglik(&cand);
            if cll.is_finite() && cll >= ll - 1e-12 {
                theta = cand;
                let gain = cll - ll;
                ll = cll;
                accepted = true;
                if gain.abs() < 1e-10 * (1.0 + ll.abs()) && score.amax() < 1e-6 * n as f64 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = score.amax() < 1e-6 * n as f64;
            break;
        }
        if (&design * &theta).amax() > SEPARATION_ETA {
            separated = true;
            break;
        }
        if converged {
            break;
        }
    }
    if separated {
        log::warn!("event=logistic_separation kind=mle iterations={iterations}");
    }
    let coef = theta.rows(1, p).into_owned();
    Ok(LogisticFit { intercept: theta[0], coef, iterations, converged, separated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn simulate(n: usize, theta: &[f64], intercept: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = theta.len();
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let d = (0..n)
            .map(|i| {
                let eta: f64 = intercept + (0..p).map(|j| x[(i, j)] * theta[j]).sum::<f64>();
                rng.random::<f64>() < sigmoid(eta)
            })
            .collect();
        (x, d)
    }

    #[test]
    fn null_model_on_zero_design() {
        let x = DMatrix::zeros(10, 3);
        let d: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let fit = fit_l1_logistic(&x, &d, 0.1).unwrap();
        assert_abs_diff_eq!(fit.intercept, (0.3f64 / 0.7).ln(), epsilon = 1e-7);
        assert!(fit.coef.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn huge_penalty_zeroes_slopes() {
        let (x, d) = simulate(100, &[1.0, -1.0], 0.0, 1);
        let fit = fit_l1_logistic(&x, &d, 1e6).unwrap();
        assert!(fit.coef.iter().all(|&c| c == 0.0));
        assert!(fit.converged);
    }

    #[test]
    fn kkt_certificate_holds() {
        let (x, d) = simulate(150, &[1.0, 0.5, 0.0, 0.0, -0.7, 0.0], 0.3, 2);
        for lambda in [0.005, 0.02, 0.08] {
            let fit = fit_l1_logistic(&x, &d, lambda).unwrap();
            assert!(fit.converged);
            assert!(logistic_kkt_violation(&x, &d, &fit, lambda) <= 1e-7);
        }
    }

    #[test]
    fn mle_solves_score_equations() {
        let (x, d) = simulate(300, &[0.8, -0.4, 0.2], -0.2, 3);
        let fit = fit_logistic_mle(&x, &d).unwrap();
        assert!(fit.converged && !fit.separated);
        assert!(logistic_kkt_violation(&x, &d, &fit, 0.0) < 1e-8);
    }

    #[test]
    fn separated_data_is_flagged() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let d = vec![false, false, false, true, true, true];
        let fit = fit_logistic_mle(&x, &d).unwrap();
        assert!(fit.separated);
    }
}
