//! Independent oracles and randomized identity checks shared by the core
//! test suites and the acceptance harness.
#![allow(dead_code)]

use drdid::estimator::{fit_response, pseudo_outcome, FitOptions, Penalty, SieveDesign};
use drdid::sieve::{build_basis, ProjectionCache};
use drdid::solvers::lasso::objective;
use drdid::solvers::{constraint_violation, dantzig_solve, kkt_violation, lasso_solve, DantzigProblem, LassoProblem};
use drdid::{NuisanceFit, Sample};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn random_sample(rng: &mut ChaCha20Rng, n: usize, p: usize) -> Sample {
    let x = normal_mat(rng, n, p);
    let z = normal_vec(rng, n);
    let mut d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    d[0] = true;
    d[1] = false;
    let dy = DVector::from_fn(n, |i, _| x[(i, 0)] + z[i].exp() + rng.sample::<f64, _>(StandardNormal));
    Sample::new(dy, d, x, z).unwrap()
}

pub fn random_nuisance(rng: &mut ChaCha20Rng, n: usize) -> NuisanceFit {
    let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let phi1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let phi0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    NuisanceFit::new(pi, phi1, phi0, (0..n).map(|i| i % 2).collect(), 0.01).unwrap()
}

pub fn random_cache(rng: &mut ChaCha20Rng, n: usize, degree: usize) -> ProjectionCache {
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let (_, psi) = build_basis(&z, degree).unwrap();
    ProjectionCache::new(psi).unwrap()
}

fn sq_norm_n(v: &DVector<f64>) -> f64 {
    v.norm_squared() / v.len() as f64
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Minimizes the three-coefficient Lasso objective by repeatedly gridding a
/// box around the best point found so far and shrinking it.
pub fn lasso_grid_oracle(a: &DMatrix<f64>, s: &DVector<f64>, lambda: f64) -> f64 {
    let n = a.nrows() as f64;
    let g: Matrix3<f64> = Matrix3::from_fn(|i, j| a.column(i).dot(&a.column(j)) / n);
    let c: Vector3<f64> = Vector3::from_fn(|i, _| a.column(i).dot(s) / n);
    let sts = s.norm_squared() / n;
    let f = |b: &Vector3<f64>| sts - 2.0 * c.dot(b) + b.dot(&(g * b)) + lambda * b.abs().sum();
    // every minimizer satisfies lambda * |b|_1 <= f(0)
    let mut radius = sts / lambda;
    let mut center = Vector3::zeros();
    let mut best = f(&center);
    let steps = 30i32;
    for _ in 0..60 {
        let h = 2.0 * radius / steps as f64;
        let base = center;
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    let b = base + Vector3::new(i as f64, j as f64, k as f64) * h - Vector3::repeat(radius);
                    let v = f(&b);
                    if v < best {
                        best = v;
                        center = b;
                    }
                }
            }
        }
        radius *= 0.6;
    }
    best
}

/// Minimum of |w|_1 over `|target + gram w|_inf <= bound` for three
/// coordinates, by visiting every intersection of three of the constraint
/// and coordinate planes.
pub fn dantzig_vertex_oracle(gram: &Matrix3<f64>, target: &Vector3<f64>, bound: f64) -> f64 {
    let mut planes: Vec<(Vector3<f64>, f64)> = Vec::new();
    for i in 0..3 {
        let row = gram.row(i).transpose();
        planes.push((row, bound - target[i]));
        planes.push((row, -bound - target[i]));
        planes.push((Vector3::from_fn(|j, _| if i == j { 1.0 } else { 0.0 }), 0.0));
    }
    let mut best = f64::INFINITY;
    for i in 0..planes.len() {
        for j in i + 1..planes.len() {
            for k in j + 1..planes.len() {
                let m = Matrix3::from_rows(&[planes[i].0.transpose(), planes[j].0.transpose(), planes[k].0.transpose()]);
                let rhs = Vector3::new(planes[i].1, planes[j].1, planes[k].1);
                let Some(w) = m.lu().solve(&rhs) else { continue };
                if (target + gram * w).amax() <= bound * (1.0 + 1e-10) + 1e-12 {
                    best = best.min(w.abs().sum());
                }
            }
        }
    }
    best
}

/// Random m=3 Lasso instance compared against the grid oracle.
pub fn lasso_oracle_case(seed: u64, lambda: Option<f64>) -> Check {
    let mut rng = rng(seed);
    let a = normal_mat(&mut rng, 20, 3);
    let beta = DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
    let s = &a * &beta + normal_vec(&mut rng, 20);
    let lambda = lambda.unwrap_or_else(|| rng.random_range(0.02..0.8));
    let sol = lasso_solve(&LassoProblem::new(&a, &s, lambda)).map_err(|e| e.to_string())?;
    ensure(sol.converged, || "not converged".into())?;
    let ours = objective(&a, &s, &sol.coef, &[1.0; 3], lambda);
    let oracle = lasso_grid_oracle(&a, &s, lambda);
    ensure((ours - oracle).abs() <= 1e-5 && ours <= oracle + 1e-5, || format!("solver {ours} vs oracle {oracle}"))
}

/// Random m=3 Dantzig instance compared against vertex enumeration.
pub fn dantzig_oracle_case(seed: u64, bound: Option<f64>) -> Check {
    let mut rng = rng(seed);
    let a = normal_mat(&mut rng, 15, 3);
    let gram = a.tr_mul(&a) / 15.0;
    let target = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let bound = bound.unwrap_or_else(|| rng.random_range(0.02..0.5));
    let sol = dantzig_solve(&DantzigProblem { gram: &gram, target: &target, bound }).map_err(|e| e.to_string())?;
    ensure(sol.escalations == 0, || "bound escalated on a feasible problem".into())?;
    ensure(constraint_violation(&gram, &target, &sol.w) <= bound * (1.0 + 1e-8), || "infeasible".into())?;
    let oracle = dantzig_vertex_oracle(&Matrix3::from_fn(|i, j| gram[(i, j)]), &Vector3::from_fn(|i, _| target[i]), bound);
    let ours = sol.w.abs().sum();
    ensure((ours - oracle).abs() <= 1e-6 * oracle.max(1.0), || format!("solver {ours} vs oracle {oracle}"))
}

/// Weighted Lasso on a random instance; the KKT certificate must hold.
pub fn lasso_kkt_case(seed: u64, n: usize, m: usize, lambda: f64, unpenalized: usize) -> Check {
    let mut rng = rng(seed);
    let a = normal_mat(&mut rng, n, m);
    let s = normal_vec(&mut rng, n) * 2.0;
    let mut weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
    // unpenalized columns only when they cannot make the fit singular
    if m + 1 < n {
        for w in weights.iter_mut().take(unpenalized) {
            *w = 0.0;
        }
    }
    let problem = LassoProblem::new(&a, &s, lambda).with_weights(weights.clone());
    let sol = lasso_solve(&problem).map_err(|e| e.to_string())?;
    ensure(sol.converged, || "not converged".into())?;
    let scale = 1.0 + s.norm_squared() / n as f64;
    let v = kkt_violation(&a, &s, &sol.coef, &weights, lambda);
    ensure(v <= problem.tol + 1e-10 * scale, || format!("KKT violation {v}"))
}

/// Dantzig on a random positive-definite Gram; feasibility and the
/// inverse-point bound must hold.
pub fn dantzig_feasibility_case(seed: u64, m: usize, bound: f64) -> Check {
    let mut rng = rng(seed);
    let a = normal_mat(&mut rng, m + 10, m);
    let gram = a.tr_mul(&a) / (m + 10) as f64;
    let target = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let sol = dantzig_solve(&DantzigProblem { gram: &gram, target: &target, bound }).map_err(|e| e.to_string())?;
    let v = constraint_violation(&gram, &target, &sol.w);
    ensure(v <= sol.bound * (1.0 + 1e-8), || format!("violation {v} above bound {}", sol.bound))?;
    let exact = gram.clone().lu().solve(&(-&target)).ok_or("singular gram")?;
    ensure(sol.w.abs().sum() <= exact.abs().sum() * (1.0 + 1e-6) + 1e-9, || "l1 norm above the inverse point".into())
}

pub fn idempotence_case(seed: u64, n: usize, degree: usize, m: usize) -> Check {
    let mut rng = rng(seed);
    let cache = random_cache(&mut rng, n, degree);
    let v = normal_mat(&mut rng, n, m);
    let (proj, resid) = cache.project(&v);
    let (proj2, _) = cache.project(&proj);
    ensure((&proj2 - &proj).norm() <= 1e-8 * v.norm(), || "projection not idempotent".into())?;
    for j in 0..m {
        let col = resid.column(j);
        let scale = v.column(j).norm();
        for &r in cache.retained() {
            let dot = cache.psi().column(r).dot(&col).abs();
            ensure(dot <= 1e-8 * scale * cache.psi().column(r).norm(), || format!("residual not orthogonal: {dot}"))?;
        }
    }
    Ok(())
}

pub fn decomposition_case(seed: u64, n: usize, p: usize, degree: usize) -> Check {
    let mut rng = rng(seed);
    let cache = random_cache(&mut rng, n, degree);
    let x = normal_mat(&mut rng, n, p);
    let beta = normal_vec(&mut rng, p);
    let gamma = normal_vec(&mut rng, cache.psi().ncols());
    let (px, x_tilde) = cache.project(&x);
    let lhs = sq_norm_n(&(&x * &beta + cache.psi() * &gamma));
    let rhs = sq_norm_n(&(&x_tilde * &beta)) + sq_norm_n(&(&px * &beta + cache.psi() * &gamma));
    ensure((lhs - rhs).abs() <= 1e-8 * lhs.max(1e-12), || format!("{lhs} vs {rhs}"))
}

/// Unpenalized profiled fit against a joint least-squares solve.
pub fn profiled_joint_case(seed: u64, n: usize, p: usize, degree: usize) -> Check {
    let mut rng = rng(seed);
    let sample = random_sample(&mut rng, n, p);
    let design = SieveDesign::new(&sample, degree).map_err(|e| e.to_string())?;
    let opts = FitOptions { degree, penalty: Penalty::Fixed(0.0), tol: 1e-12 };
    let fit = fit_response(&sample, &design, sample.dy(), &opts).map_err(|e| e.to_string())?;
    let fitted = sample.dy() - &fit.residuals;
    let psi = design.cache.psi();
    let mut joint = DMatrix::zeros(n, p + psi.ncols());
    joint.columns_mut(0, p).copy_from(sample.x());
    joint.columns_mut(p, psi.ncols()).copy_from(psi);
    let coef = joint.clone().svd(true, true).solve(sample.dy(), 1e-12)?;
    let gap = (fitted - &joint * coef).amax();
    ensure(gap <= 1e-6, || format!("fitted values differ by {gap}"))
}

pub fn weight_sign_case(seed: u64, n: usize) -> Check {
    let mut rng = rng(seed);
    let sample = random_sample(&mut rng, n, 2);
    let nuisance = random_nuisance(&mut rng, n);
    let ps = pseudo_outcome(&sample, &nuisance).map_err(|e| e.to_string())?;
    for i in 0..n {
        let pi = nuisance.pi_hat[i];
        ensure((ps.rho_hat[i] > 0.0) == sample.d()[i], || format!("row {i} has the wrong sign"))?;
        let expect = if sample.d()[i] { 1.0 / pi } else { -1.0 / (1.0 - pi) };
        ensure((ps.rho_hat[i] - expect).abs() <= 1e-12 * expect.abs(), || format!("row {i}: {} vs {expect}", ps.rho_hat[i]))?;
        ensure(ps.rho_hat[i].abs() <= 1.0 / nuisance.epsilon_clip + 1e-9, || "weight above the clip bound".into())?;
    }
    Ok(())
}
