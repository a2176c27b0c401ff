//! Cross-fitted first stage: propensity score and arm-specific outcome
//! trend regressions, each predicted out of fold.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{validate_overlap, OverlapDiagnostics, Sample, TruthInfo};
use crate::error::{Error, NuisanceKind, Result};
use crate::linalg::std_dev;
use crate::logistic::{fit_l1_logistic, fit_logistic_mle};
use crate::sieve::BasisSpec;
use crate::solvers::{lasso_solve, LassoProblem};

pub const DEFAULT_FOLDS: usize = 2;
pub const DEFAULT_CLIP: f64 = 0.01;
/// Degree of the trigonometric expansion of `z` appended to `x` for the
/// first-stage learners.
pub const LEARNER_Z_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    L1Logistic,
    L1Linear,
    Ols,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Multiplier on `sd(response) * sqrt(log p / n_train)`.
    #[serde(default = "default_rule")]
    pub lambda_rule: f64,
    /// Refit without penalty on the selected columns (penalized kinds only).
    #[serde(default)]
    pub refit: bool,
}

fn default_rule() -> f64 {
    1.0
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        LearnerSpec { kind, lambda_rule: 1.0, refit: false }
    }

    pub fn default_propensity() -> Self {
        Self::new(LearnerKind::L1Logistic)
    }

    /// Post-selection least squares: the shrunken Lasso fits of the two arm
    /// regressions err in the same direction and the bias survives the
    /// doubly robust combination.
    pub fn default_outcome() -> Self {
        LearnerSpec { refit: true, ..Self::new(LearnerKind::L1Linear) }
    }

    pub fn validate(&self) -> Result<()> {
        let penalized = matches!(self.kind, LearnerKind::L1Logistic | LearnerKind::L1Linear);
        if penalized && !(self.lambda_rule > 0.0 && self.lambda_rule.is_finite()) {
            return Err(Error::InvalidLearner(format!("lambda_rule must be positive, got {}", self.lambda_rule)));
        }
        Ok(())
    }
}

/// Out-of-fold nuisance values for every row of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub pi_hat: Vec<f64>,
    pub phi1_hat: Vec<f64>,
    pub phi0_hat: Vec<f64>,
    pub fold_id: Vec<usize>,
    pub epsilon_clip: f64,
    /// Overlap summary taken before clipping.
    pub overlap: OverlapDiagnostics,
}

impl NuisanceFit {
    /// Assembles a fit from raw values, clipping the propensity scores.
    pub fn new(pi_raw: Vec<f64>, phi1_hat: Vec<f64>, phi0_hat: Vec<f64>, fold_id: Vec<usize>, epsilon: f64) -> Result<Self> {
        let n = pi_raw.len();
        if phi1_hat.len() != n || phi0_hat.len() != n || fold_id.len() != n {
            return Err(Error::DimensionMismatch("nuisance vectors differ in length".into()));
        }
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::InvalidProblem(format!("clip epsilon must be in (0, 0.5), got {epsilon}")));
        }
        if pi_raw.iter().chain(&phi1_hat).chain(&phi0_hat).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite nuisance value".into()));
        }
        let overlap = validate_overlap(&pi_raw, epsilon);
        let pi_hat = pi_raw.iter().map(|p| p.clamp(epsilon, 1.0 - epsilon)).collect();
        Ok(NuisanceFit { pi_hat, phi1_hat, phi0_hat, fold_id, epsilon_clip: epsilon, overlap })
    }

    /// Nuisances evaluated at the true data-generating functions.
    pub fn from_truth(sample: &Sample, truth: &TruthInfo, epsilon: f64) -> Result<Self> {
        let n = sample.n();
        let mut pi = Vec::with_capacity(n);
        let mut phi1 = Vec::with_capacity(n);
        let mut phi0 = Vec::with_capacity(n);
        let mut row = vec![0.0; sample.p()];
        for i in 0..n {
            for (j, v) in row.iter_mut().enumerate() {
                *v = sample.x()[(i, j)];
            }
            let z = sample.z()[i];
            pi.push(truth.pi0(&row, z));
            phi1.push(truth.phi1(&row, z));
            phi0.push(truth.phi0(&row, z));
        }
        NuisanceFit::new(pi, phi1, phi0, vec![0; n], epsilon)
    }

    pub fn n(&self) -> usize {
        self.pi_hat.len()
    }
}

/// Stratified fold assignment: treated and control rows are shuffled
/// separately and dealt round-robin into `k` folds.
pub fn stratified_folds(d: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut fold = vec![0; d.len()];
    for arm in [true, false] {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d[i] == arm).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    fold
}

/// Learner features: `x`, the raw `z`, and the non-constant columns of a
/// low-degree trigonometric basis in `z`. The periodic basis alone cannot
/// follow a trend across the range of `z`, hence the raw column.
pub fn learner_features(sample: &Sample) -> Result<DMatrix<f64>> {
    let z = sample.z().as_slice();
    let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let p = sample.p();
    let n = sample.n();
    if !(lo < hi) {
        return Ok(sample.x().clone());
    }
    let spec = BasisSpec::new(LEARNER_Z_DEGREE, lo, hi)?;
    let psi = spec.matrix(z);
    let extra = spec.k() - 1;
    let mut w = DMatrix::zeros(n, p + 1 + extra);
    w.view_mut((0, 0), (n, p)).copy_from(sample.x());
    w.column_mut(p).copy_from(sample.z());
    w.view_mut((0, p + 1), (n, extra)).copy_from(&psi.columns(1, extra));
    Ok(w)
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(w: &DMatrix<f64>) -> Self {
        let n = w.nrows() as f64;
        let mut mean = Vec::with_capacity(w.ncols());
        let mut scale = Vec::with_capacity(w.ncols());
        for col in w.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 1e-24 { var.sqrt() } else { 0.0 });
        }
        Standardizer { mean, scale }
    }

    fn apply(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = w.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            if self.scale[j] == 0.0 {
                col.fill(0.0);
            } else {
                col.add_scalar_mut(-self.mean[j]);
                col /= self.scale[j];
            }
        }
        out
    }
}

fn penalty_level(rule: f64, response_sd: f64, p: usize, n: usize) -> f64 {
    rule * response_sd * ((p.max(2) as f64).ln() / n as f64).sqrt()
}

fn select_rows(w: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    w.select_rows(rows)
}

fn support(coef: &DVector<f64>) -> Vec<usize> {
    coef.iter().enumerate().filter(|(_, &c)| c != 0.0).map(|(j, _)| j).collect()
}

fn ols_fit_predict(w_train: &DMatrix<f64>, y_train: &[f64], w_test: &DMatrix<f64>) -> std::result::Result<Vec<f64>, String> {
    let n = w_train.nrows();
    let mut design = DMatrix::from_element(n, w_train.ncols() + 1, 1.0);
    design.view_mut((0, 1), (n, w_train.ncols())).copy_from(w_train);
    let y = DVector::from_column_slice(y_train);
    let theta = design.svd(true, true).solve(&y, 1e-10).map_err(|e| e.to_string())?;
    let preds = w_test * theta.rows(1, w_train.ncols());
    Ok(preds.iter().map(|v| v + theta[0]).collect())
}

/// Fits a learner on `(w_train, y_train)` and predicts at `w_test`.
/// `binary` marks a propensity target.
pub fn fit_predict(
    spec: &LearnerSpec,
    w_train: &DMatrix<f64>,
    y_train: &[f64],
    w_test: &DMatrix<f64>,
    binary: bool,
) -> std::result::Result<Vec<f64>, String> {
    let n = w_train.nrows();
    if n == 0 {
        return Err("empty training set".into());
    }
    let ybar = y_train.iter().sum::<f64>() / n as f64;
    match spec.kind {
        LearnerKind::Constant => Ok(vec![ybar; w_test.nrows()]),
        LearnerKind::Ols => ols_fit_predict(w_train, y_train, w_test),
        LearnerKind::L1Linear => {
            if binary {
                return Err("l1_linear is not a propensity learner".into());
            }
            if n < 2 {
                return Ok(vec![ybar; w_test.nrows()]);
            }
            let st = Standardizer::fit(w_train);
            let a = st.apply(w_train);
            let s = DVector::from_iterator(n, y_train.iter().map(|v| v - ybar));
            let lambda = penalty_level(spec.lambda_rule, std_dev(y_train), w_train.ncols(), n);
            let sol = lasso_solve(&LassoProblem::new(&a, &s, lambda)).map_err(|e| e.to_string())?;
            if spec.refit {
                let support = support(&sol.coef);
                if support.is_empty() {
                    return Ok(vec![ybar; w_test.nrows()]);
                }
                return ols_fit_predict(&w_train.select_columns(&support), y_train, &w_test.select_columns(&support));
            }
            let test = st.apply(w_test);
            Ok((test * sol.coef).iter().map(|v| v + ybar).collect())
        }
        LearnerKind::L1Logistic => {
            if !binary {
                return Err("l1_logistic is a propensity learner".into());
            }
            let d: Vec<bool> = y_train.iter().map(|&v| v > 0.5).collect();
            let st = Standardizer::fit(w_train);
            let a = st.apply(w_train);
            let lambda = penalty_level(spec.lambda_rule, std_dev(y_train), w_train.ncols(), n);
            let fit = fit_l1_logistic(&a, &d, lambda).map_err(|e| e.to_string())?;
            if !fit.converged && !fit.separated {
                log::warn!("event=propensity_not_converged sweeps={}", fit.iterations);
            }
            let test = st.apply(w_test);
            if spec.refit {
                let support = support(&fit.coef);
                if !support.is_empty() {
                    match fit_logistic_mle(&a.select_columns(&support), &d) {
                        Ok(refit) if refit.converged && !refit.separated => {
                            return Ok(refit.predict(&test.select_columns(&support)).iter().copied().collect());
                        }
                        _ => log::debug!("event=propensity_refit_fallback support={}", support.len()),
                    }
                }
            }
            Ok(fit.predict(&test).iter().copied().collect())
        }
    }
}

/// Cross-fits the propensity score and the two outcome-trend regressions.
///
/// Rows are split into `k` folds stratified on treatment. For each fold the
/// learners are trained on the other folds (the outcome learner for arm `a`
/// only on training rows with `D = a`) and evaluated on the held-out fold.
pub fn cross_fit(
    sample: &Sample,
    prop_learner: &LearnerSpec,
    outcome_learner: &LearnerSpec,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<NuisanceFit> {
    prop_learner.validate()?;
    outcome_learner.validate()?;
    if prop_learner.kind == LearnerKind::L1Linear {
        return Err(Error::InvalidLearner("l1_linear cannot model a propensity score".into()));
    }
    if outcome_learner.kind == LearnerKind::L1Logistic {
        return Err(Error::InvalidLearner("l1_logistic cannot model an outcome trend".into()));
    }
    if k < 2 {
        return Err(Error::InvalidProblem(format!("need at least 2 folds, got {k}")));
    }
    let n = sample.n();
    if n < 4 * k {
        return Err(Error::InvalidSample(format!("{n} rows are too few for {k} folds")));
    }
    let treated = sample.n_treated();
    for (stratum, count) in [(1u8, treated), (0u8, n - treated)] {
        if count < k {
            return Err(Error::InsufficientStratum { stratum, count, needed: k });
        }
    }

    let fold_id = stratified_folds(sample.d(), k, seed);
    let w = learner_features(sample)?;
    let d_f: Vec<f64> = sample.d().iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let dy = sample.dy().as_slice();

    let mut pi = vec![0.0; n];
    let mut phi1 = vec![0.0; n];
    let mut phi0 = vec![0.0; n];
    for fold in 0..k {
        let test: Vec<usize> = (0..n).filter(|&i| fold_id[i] == fold).collect();
        let train: Vec<usize> = (0..n).filter(|&i| fold_id[i] != fold).collect();
        let w_test = select_rows(&w, &test);

        let w_train = select_rows(&w, &train);
        let d_train: Vec<f64> = train.iter().map(|&i| d_f[i]).collect();
        let pred = fit_predict(prop_learner, &w_train, &d_train, &w_test, true)
            .map_err(|reason| Error::LearnerFailure { fold, which: NuisanceKind::Propensity, reason })?;
        for (&i, v) in test.iter().zip(pred) {
            pi[i] = v;
        }

        for (arm, which, out) in [
            (true, NuisanceKind::OutcomeTreated, &mut phi1),
            (false, NuisanceKind::OutcomeControl, &mut phi0),
        ] {
            let rows: Vec<usize> = train.iter().copied().filter(|&i| sample.d()[i] == arm).collect();
            let w_arm = select_rows(&w, &rows);
            let y_arm: Vec<f64> = rows.iter().map(|&i| dy[i]).collect();
            let pred = fit_predict(outcome_learner, &w_arm, &y_arm, &w_test, false)
                .map_err(|reason| Error::LearnerFailure { fold, which, reason })?;
            for (&i, v) in test.iter().zip(pred) {
                out[i] = v;
            }
        }
    }
    NuisanceFit::new(pi, phi1, phi0, fold_id, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisspecTarget {
    Propensity,
    Outcomes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisspecMode {
    /// Propensity replaced by the treated share, outcome regressions by
    /// arm means.
    Constant,
    /// Values multiplied by 1.5 (propensities re-clipped).
    WrongScale,
}

/// Returns a copy of `fit` with one nuisance block deliberately wrong.
pub fn misspecify(fit: &NuisanceFit, sample: &Sample, which: MisspecTarget, mode: MisspecMode) -> NuisanceFit {
    let mut out = fit.clone();
    let eps = fit.epsilon_clip;
    match (which, mode) {
        (MisspecTarget::Propensity, MisspecMode::Constant) => {
            let share = sample.treated_fraction().clamp(eps, 1.0 - eps);
            out.pi_hat.iter_mut().for_each(|p| *p = share);
        }
        (MisspecTarget::Propensity, MisspecMode::WrongScale) => {
            out.pi_hat.iter_mut().for_each(|p| *p = (*p * 1.5).clamp(eps, 1.0 - eps));
        }
        (MisspecTarget::Outcomes, MisspecMode::Constant) => {
            let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
            for (&dy, &t) in sample.dy().iter().zip(sample.d()) {
                if t {
                    s1 += dy;
                    n1 += 1;
                } else {
                    s0 += dy;
                    n0 += 1;
                }
            }
            let (m1, m0) = (s1 / n1 as f64, s0 / n0 as f64);
            out.phi1_hat.iter_mut().for_each(|v| *v = m1);
            out.phi0_hat.iter_mut().for_each(|v| *v = m0);
        }
        (MisspecTarget::Outcomes, MisspecMode::WrongScale) => {
            out.phi1_hat.iter_mut().for_each(|v| *v *= 1.5);
            out.phi0_hat.iter_mut().for_each(|v| *v *= 1.5);
        }
    }
    out.overlap = validate_overlap(&out.pi_hat, eps);
    out
}
