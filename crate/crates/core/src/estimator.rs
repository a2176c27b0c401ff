//! Doubly robust pseudo-outcome, the penalized partially linear second
//! stage, and the unpenalized inverse-probability-weighted baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::linalg::std_dev;
use crate::logistic::fit_logistic_mle;
use crate::sieve::{build_basis, BasisSpec, ProjectionCache};
use crate::solvers::{lasso_solve, LassoProblem};

pub const DEFAULT_DEGREE: usize = 8;
/// Propensity clip used by the baseline estimator.
pub const BASELINE_CLIP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcome {
    pub s_hat: DVector<f64>,
    pub rho_hat: DVector<f64>,
}

/// `rho_i * (dy_i - (1 - pi_i) phi1_i - pi_i phi0_i)` with
/// `rho_i = 1/pi_i` for treated rows and `-1/(1 - pi_i)` otherwise.
pub fn pseudo_outcome(sample: &Sample, nuisance: &crate::nuisance::NuisanceFit) -> Result<PseudoOutcome> {
    let n = sample.n();
    if nuisance.n() != n {
        return Err(Error::DimensionMismatch(format!("nuisance has {} rows, sample {n}", nuisance.n())));
    }
    let mut s_hat = DVector::zeros(n);
    let mut rho_hat = DVector::zeros(n);
    for i in 0..n {
        let pi = nuisance.pi_hat[i];
        let rho = if sample.d()[i] { 1.0 / pi } else { -1.0 / (1.0 - pi) };
        rho_hat[i] = rho;
        s_hat[i] = rho * (sample.dy()[i] - (1.0 - pi) * nuisance.phi1_hat[i] - pi * nuisance.phi0_hat[i]);
    }
    Ok(PseudoOutcome { s_hat, rho_hat })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Penalty {
    /// `scale * sd(response) * sqrt(log p / n)`.
    Auto(f64),
    Fixed(f64),
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty::Auto(1.0)
    }
}

impl Penalty {
    pub fn resolve(&self, response_sd: f64, p: usize, n: usize) -> Result<f64> {
        let lambda = match *self {
            Penalty::Auto(c) => c * response_sd * rate(p, n),
            Penalty::Fixed(l) => l,
        };
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidProblem(format!("penalty must be finite and non-negative, got {lambda}")));
        }
        Ok(lambda)
    }
}

/// `sqrt(log p / n)`, with `p` floored at 2 so a single covariate still
/// gets a positive rate.
pub fn rate(p: usize, n: usize) -> f64 {
    ((p.max(2) as f64).ln() / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub degree: usize,
    pub penalty: Penalty,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { degree: DEFAULT_DEGREE, penalty: Penalty::default(), tol: 1e-8 }
    }
}

/// Sparse view of a coefficient vector used in serialized output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCoef {
    pub len: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseCoef {
    pub fn from_dense(v: &DVector<f64>) -> Self {
        SparseCoef { len: v.len(), entries: v.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(i, &x)| (i, x)).collect() }
    }

    pub fn to_dense(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.len);
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }
}

fn ser_sparse<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    SparseCoef::from_dense(v).serialize(s)
}

fn de_sparse<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
    Ok(SparseCoef::deserialize(d)?.to_dense())
}

/// Second-stage fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrDidFit {
    #[serde(serialize_with = "ser_sparse", deserialize_with = "de_sparse")]
    pub beta_hat: DVector<f64>,
    pub gamma_hat: DVector<f64>,
    pub basis: BasisSpec,
    pub lambda: f64,
    pub options: FitOptions,
    /// `s_hat - x beta_hat - psi gamma_hat`.
    #[serde(skip)]
    pub residuals: DVector<f64>,
    pub lasso_iterations: usize,
    pub lasso_converged: bool,
    pub dropped_basis_columns: Vec<usize>,
}

impl DrDidFit {
    pub fn n_selected(&self) -> usize {
        self.beta_hat.iter().filter(|&&b| b != 0.0).count()
    }

    pub fn f_hat(&self, z0: f64) -> f64 {
        self.basis.eval(z0).dot(&self.gamma_hat)
    }
}

/// Basis, projection and residualized covariates shared by the second stage
/// and the de-biasing step.
#[derive(Debug, Clone)]
pub struct SieveDesign {
    pub basis: BasisSpec,
    pub cache: ProjectionCache,
    pub x_tilde: DMatrix<f64>,
}

impl SieveDesign {
    pub fn new(sample: &Sample, degree: usize) -> Result<Self> {
        let (basis, psi) = build_basis(sample.z().as_slice(), degree)?;
        let cache = ProjectionCache::new(psi)?;
        let (_, x_tilde) = cache.project(sample.x());
        Ok(SieveDesign { basis, cache, x_tilde })
    }
}

/// Fits the second stage on a doubly robust pseudo-outcome.
pub fn fit(sample: &Sample, nuisance: &crate::nuisance::NuisanceFit, options: &FitOptions) -> Result<DrDidFit> {
    let pseudo = pseudo_outcome(sample, nuisance)?;
    let design = SieveDesign::new(sample, options.degree)?;
    fit_response(sample, &design, &pseudo.s_hat, options)
}

/// Penalized partially linear regression of `response` on `x` and the sieve
/// in `z`, solved by profiling out the sieve part.
pub fn fit_response(sample: &Sample, design: &SieveDesign, response: &DVector<f64>, options: &FitOptions) -> Result<DrDidFit> {
    let n = sample.n();
    if response.len() != n || design.x_tilde.nrows() != n {
        return Err(Error::DimensionMismatch("response and design rows differ".into()));
    }
    let s_tilde = design.cache.residualize_vec(response);
    let lambda = options.penalty.resolve(std_dev(response.as_slice()), sample.p(), n)?;
    let problem = LassoProblem::new(&design.x_tilde, &s_tilde, lambda).with_tol(options.tol);
    let sol = lasso_solve(&problem)?;
    let beta_hat = sol.coef;
    let partial = response - sample.x() * &beta_hat;
    let gamma_hat = design.cache.fit_coefficients(&partial);
    let residuals = partial - design.cache.psi() * &gamma_hat;
    Ok(DrDidFit {
        beta_hat,
        gamma_hat,
        basis: design.basis,
        lambda,
        options: *options,
        residuals,
        lasso_iterations: sol.iterations,
        lasso_converged: sol.converged,
        dropped_basis_columns: design.cache.dropped().to_vec(),
    })
}

/// `x0' beta_hat + psi(z0)' gamma_hat`.
pub fn predict_att(fit: &DrDidFit, x0: &[f64], z0: f64) -> Result<f64> {
    if x0.len() != fit.beta_hat.len() {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries, fit has {}", x0.len(), fit.beta_hat.len())));
    }
    let lin: f64 = x0.iter().zip(fit.beta_hat.iter()).map(|(a, b)| a * b).sum();
    Ok(lin + fit.f_hat(z0))
}

/// Unpenalized baseline: IPW pseudo-outcome `rho_i * dy_i` with a logistic
/// MLE propensity, regressed jointly on `[x, psi(z)]` by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiDidFit {
    pub beta_hat: DVector<f64>,
    pub gamma_hat: DVector<f64>,
    pub basis: BasisSpec,
    /// Heteroskedasticity-robust covariance of `(beta_hat, gamma_hat)` over
    /// the retained regressors; dropped basis columns have zero rows.
    pub covariance: DMatrix<f64>,
    pub n: usize,
    pub propensity_separated: bool,
}

impl SemiDidFit {
    pub fn beta_se(&self, j: usize) -> f64 {
        self.covariance[(j, j)].max(0.0).sqrt()
    }

    pub fn f_hat(&self, z0: f64) -> f64 {
        self.basis.eval(z0).dot(&self.gamma_hat)
    }

    pub fn f_se(&self, z0: f64) -> f64 {
        let p = self.beta_hat.len();
        let k = self.gamma_hat.len();
        let psi = self.basis.eval(z0);
        let v = self.covariance.view((p, p), (k, k));
        psi.dot(&(v * &psi)).max(0.0).sqrt()
    }
}

pub fn fit_semidid(sample: &Sample, degree: usize) -> Result<SemiDidFit> {
    let (n, p) = (sample.n(), sample.p());
    let k = 2 * degree + 1;
    if n <= p + k {
        return Err(Error::SemiDidInfeasible { n, regressors: p + k });
    }
    let prop = fit_logistic_mle(sample.x(), sample.d())?;
    if prop.separated {
        log::warn!("event=semidid_propensity_separated n={n} p={p}");
    }
    let pi = prop.predict(sample.x());
    let s = DVector::from_fn(n, |i, _| {
        let pi = pi[i].clamp(BASELINE_CLIP, 1.0 - BASELINE_CLIP);
        let rho = if sample.d()[i] { 1.0 / pi } else { -1.0 / (1.0 - pi) };
        rho * sample.dy()[i]
    });

    let (basis, psi) = build_basis(sample.z().as_slice(), degree)?;
    let cache = ProjectionCache::new(psi)?;
    let retained = cache.retained().to_vec();
    let m = p + retained.len();
    let mut a = DMatrix::zeros(n, m);
    a.view_mut((0, 0), (n, p)).copy_from(sample.x());
    for (c, &j) in retained.iter().enumerate() {
        a.column_mut(p + c).copy_from(&cache.psi().column(j));
    }
    let gram = a.tr_mul(&a);
    let chol = gram.clone().cholesky().ok_or_else(|| Error::SingularDesign("joint design is rank deficient".into()))?;
    let bread = chol.inverse();
    let coef = &bread * a.tr_mul(&s);
    let resid = &s - &a * &coef;
    let mut meat = DMatrix::zeros(m, m);
    for i in 0..n {
        let row = a.row(i);
        meat.ger(resid[i] * resid[i], &row.transpose(), &row.transpose(), 1.0);
    }
    let cov_r = &bread * meat * &bread;

    let full = p + k;
    let index = |c: usize| if c < p { c } else { p + retained[c - p] };
    let mut covariance = DMatrix::zeros(full, full);
    let mut all = DVector::zeros(full);
    for c in 0..m {
        all[index(c)] = coef[c];
        for e in 0..m {
            covariance[(index(c), index(e))] = cov_r[(c, e)];
        }
    }
    Ok(SemiDidFit {
        beta_hat: all.rows(0, p).into_owned(),
        gamma_hat: all.rows(p, k).into_owned(),
        basis,
        covariance,
        n,
        propensity_separated: prop.separated,
    })
}
