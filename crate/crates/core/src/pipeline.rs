//! End-to-end estimation on one sample: cross-fit, second stage, and
//! inference at the requested targets.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::estimator::{fit_response, pseudo_outcome, DrDidFit, FitOptions, SieveDesign};
use crate::inference::{debias_f, BetaDebiaser, BetaInference, Bound, FInference};
use crate::nuisance::{cross_fit, LearnerSpec, NuisanceFit, DEFAULT_CLIP, DEFAULT_FOLDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub folds: usize,
    pub clip: f64,
    pub propensity: LearnerSpec,
    pub outcome: LearnerSpec,
    pub fit: FitOptions,
    pub beta_bound: Bound,
    pub f_bound: Bound,
    pub level: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            folds: DEFAULT_FOLDS,
            clip: DEFAULT_CLIP,
            propensity: LearnerSpec::default_propensity(),
            outcome: LearnerSpec::default_outcome(),
            fit: FitOptions::default(),
            beta_bound: Bound::default(),
            f_bound: Bound::default(),
            level: 0.90,
        }
    }
}

/// Everything produced for one sample.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub nuisance: NuisanceFit,
    pub fit: DrDidFit,
    /// One entry per requested coordinate.
    pub beta: Vec<BetaInference>,
    pub f: Option<FInference>,
}

/// Cross-fits the nuisances with `seed` and runs [`estimate_with_nuisance`].
pub fn estimate(sample: &Sample, cfg: &EstimationConfig, seed: u64, coords: &[usize], z_grid: &[f64]) -> Result<Estimate> {
    let nuisance = cross_fit(sample, &cfg.propensity, &cfg.outcome, cfg.folds, cfg.clip, seed)?;
    estimate_with_nuisance(sample, cfg, nuisance, coords, z_grid)
}

/// Second stage and inference given nuisance values. Linear targets are the
/// unit vectors at `coords`; an empty grid skips the smooth-part inference.
pub fn estimate_with_nuisance(
    sample: &Sample,
    cfg: &EstimationConfig,
    nuisance: NuisanceFit,
    coords: &[usize],
    z_grid: &[f64],
) -> Result<Estimate> {
    log::debug!(
        "event=overlap min_pi={:.4} max_pi={:.4} clipped={}",
        nuisance.overlap.min_pi_hat,
        nuisance.overlap.max_pi_hat,
        nuisance.overlap.n_clipped
    );
    let pseudo = pseudo_outcome(sample, &nuisance)?;
    let design = SieveDesign::new(sample, cfg.fit.degree)?;
    let fit = fit_response(sample, &design, &pseudo.s_hat, &cfg.fit)?;
    let p = sample.p();
    let mut beta = Vec::with_capacity(coords.len());
    if !coords.is_empty() {
        let deb = BetaDebiaser::new(&design, &fit)?;
        for &j in coords {
            if j >= p {
                return Err(crate::Error::DimensionMismatch(format!("coordinate {} exceeds p = {p}", j + 1)));
            }
            let mut xi = vec![0.0; p];
            xi[j] = 1.0;
            beta.push(deb.infer(&xi, &cfg.beta_bound, cfg.level)?);
        }
    }
    let f = if z_grid.is_empty() {
        None
    } else {
        Some(debias_f(sample, &design, &fit, z_grid, &cfg.f_bound, cfg.level)?)
    };
    Ok(Estimate { nuisance, fit, beta, f })
}
