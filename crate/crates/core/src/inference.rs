//! One-step de-biased estimates and normal confidence intervals for linear
//! functionals of the sparse coefficients and for the smooth component on a
//! grid.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::estimator::{rate, DrDidFit, SieveDesign, SparseCoef};
use crate::linalg::{condition_number, scaled_gram, z_quantile};
use crate::solvers::{dantzig_solve, DantzigProblem};

/// Largest tolerated condition number of the smooth-part sensitivity matrix.
pub const MAX_SIGMA_F_CONDITION: f64 = 1e12;

/// Tuning of the constraint level in the weight programs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Bound {
    /// `scale * sqrt(log p / n)`.
    Auto(f64),
    Fixed(f64),
}

impl Default for Bound {
    fn default() -> Self {
        Bound::Auto(1.0)
    }
}

impl Bound {
    pub fn resolve(&self, p: usize, n: usize) -> Result<f64> {
        let b = match *self {
            Bound::Auto(c) => c * rate(p, n),
            Bound::Fixed(b) => b,
        };
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidProblem(format!("constraint bound must be positive, got {b}")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaInference {
    pub xi: Vec<f64>,
    pub t_hat: f64,
    pub w_hat: SparseCoef,
    /// Asymptotic variance of `sqrt(n) (t_hat - xi' beta)`.
    pub v_beta_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n: usize,
    pub bound: f64,
    pub plug_in: f64,
}

impl BetaInference {
    pub fn std_err(&self) -> f64 {
        (self.v_beta_hat / self.n as f64).sqrt()
    }

    pub fn at_level(&self, level: f64) -> BetaInference {
        let half = z_quantile(level) * self.std_err();
        BetaInference { ci_low: self.t_hat - half, ci_high: self.t_hat + half, level, ..self.clone() }
    }
}

/// Quantities shared by all linear functionals of one fit.
pub struct BetaDebiaser<'a> {
    gram: DMatrix<f64>,
    score: DVector<f64>,
    design: &'a SieveDesign,
    fit: &'a DrDidFit,
    n: usize,
}

impl<'a> BetaDebiaser<'a> {
    pub fn new(design: &'a SieveDesign, fit: &'a DrDidFit) -> Result<Self> {
        let n = design.x_tilde.nrows();
        if fit.residuals.len() != n || fit.beta_hat.len() != design.x_tilde.ncols() {
            return Err(Error::DimensionMismatch("fit does not match design".into()));
        }
        let gram = scaled_gram(&design.x_tilde);
        let score = design.x_tilde.tr_mul(&fit.residuals) / n as f64;
        Ok(BetaDebiaser { gram, score, design, fit, n })
    }

    pub fn infer(&self, xi: &[f64], bound: &Bound, level: f64) -> Result<BetaInference> {
        let p = self.gram.nrows();
        if xi.len() != p {
            return Err(Error::DimensionMismatch(format!("xi has {} entries, expected {p}", xi.len())));
        }
        if xi.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroXi);
        }
        check_level(level)?;
        let xi_v = DVector::from_column_slice(xi);
        let b = bound.resolve(p, self.n)?;
        let sol = dantzig_solve(&DantzigProblem { gram: &self.gram, target: &xi_v, bound: b })?;
        let w = sol.w;
        let plug_in = xi_v.dot(&self.fit.beta_hat);
        let t_hat = plug_in - w.dot(&self.score);
        let wx = &self.design.x_tilde * &w;
        let v_beta_hat = wx
            .iter()
            .zip(self.fit.residuals.iter())
            .map(|(a, e)| a * a * e * e)
            .sum::<f64>()
            / self.n as f64;
        let half = z_quantile(level) * (v_beta_hat / self.n as f64).sqrt();
        Ok(BetaInference {
            xi: xi.to_vec(),
            t_hat,
            w_hat: SparseCoef::from_dense(&w),
            v_beta_hat,
            ci_low: t_hat - half,
            ci_high: t_hat + half,
            level,
            n: self.n,
            bound: sol.bound,
            plug_in,
        })
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidProblem(format!("level must be in (0, 1), got {level}")));
    }
    Ok(())
}

/// De-biased estimate and interval for `xi' beta`.
pub fn debias_beta(design: &SieveDesign, fit: &DrDidFit, xi: &[f64], bound: &Bound, level: f64) -> Result<BetaInference> {
    BetaDebiaser::new(design, fit)?.infer(xi, bound, level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FInference {
    pub z_grid: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub f_bar: Vec<f64>,
    /// Asymptotic standard deviation of `sqrt(n) (f_bar(z) - f(z))`.
    pub sigma_z: Vec<f64>,
    /// Grid points where the variance quadratic form came out negative and
    /// was clamped to zero.
    pub clamped: Vec<bool>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub level: f64,
    pub n: usize,
    pub bound: f64,
    pub m_hat: DMatrix<f64>,
    pub gamma_bar: DVector<f64>,
}

impl FInference {
    pub fn std_err(&self, g: usize) -> f64 {
        self.sigma_z[g] / (self.n as f64).sqrt()
    }

    pub fn at_level(&self, level: f64) -> FInference {
        let q = z_quantile(level);
        let mut out = self.clone();
        for g in 0..self.z_grid.len() {
            let half = q * self.std_err(g);
            out.ci_low[g] = self.f_bar[g] - half;
            out.ci_high[g] = self.f_bar[g] + half;
        }
        out.level = level;
        out
    }
}

/// One-step de-biased sieve coefficients and pointwise intervals for the
/// smooth component at each grid point.
///
/// Rows of the projection matrix `m_hat` regress each basis function on `x`
/// through the minimum-l1 program; basis columns dropped as collinear are
/// left out of the update and keep zero coefficients.
pub fn debias_f(
    sample: &Sample,
    design: &SieveDesign,
    fit: &DrDidFit,
    z_grid: &[f64],
    bound: &Bound,
    level: f64,
) -> Result<FInference> {
    check_level(level)?;
    let (n, p) = (sample.n(), sample.p());
    if fit.residuals.len() != n || design.cache.n() != n {
        return Err(Error::DimensionMismatch("fit does not match sample".into()));
    }
    if z_grid.is_empty() {
        return Err(Error::InvalidProblem("empty evaluation grid".into()));
    }
    let basis = design.basis;
    if z_grid.iter().any(|&z| z < basis.z_min || z > basis.z_max) {
        log::warn!("event=grid_outside_support z_min={} z_max={}", basis.z_min, basis.z_max);
    }
    let b = bound.resolve(p, n)?;
    let nf = n as f64;
    let x = sample.x();
    let retained = design.cache.retained().to_vec();
    let k = basis.k();
    let kr = retained.len();
    let psi = design.cache.psi().select_columns(&retained);

    let xx = scaled_gram(x);
    let cross = x.tr_mul(&psi) / nf;
    let rows: Vec<Result<(DVector<f64>, f64)>> = (0..kr)
        .into_par_iter()
        .map(|j| {
            let target = -cross.column(j).into_owned();
            let sol = dantzig_solve(&DantzigProblem { gram: &xx, target: &target, bound: b })?;
            Ok((sol.w, sol.bound))
        })
        .collect();
    let mut m_r = DMatrix::zeros(kr, p);
    let mut used_bound = b;
    for (j, r) in rows.into_iter().enumerate() {
        let (w, bj) = r?;
        m_r.row_mut(j).copy_from(&w.transpose());
        used_bound = used_bound.max(bj);
    }

    // v_i = psi_i - M x_i, stored row-wise as n x kr
    let mx = x * m_r.transpose();
    let v = &psi - &mx;
    let sigma_f = v.tr_mul(&psi) / nf;
    let cond = condition_number(&sigma_f);
    if !(cond <= MAX_SIGMA_F_CONDITION) {
        return Err(Error::SingularSigmaF(cond));
    }
    let sigma_inv = sigma_f
        .clone()
        .full_piv_lu()
        .try_inverse()
        .ok_or(Error::SingularSigmaF(f64::INFINITY))?;
    let eps = &fit.residuals;
    let correction = &sigma_inv * (v.tr_mul(eps) / nf);
    let gamma_r = DVector::from_iterator(kr, retained.iter().map(|&j| fit.gamma_hat[j]));
    let gamma_bar_r = gamma_r - correction;

    let mut omega = DMatrix::zeros(kr, kr);
    for i in 0..n {
        let e2 = eps[i] * eps[i];
        if e2 == 0.0 {
            continue;
        }
        let pr = psi.row(i).transpose();
        let mr = mx.row(i).transpose();
        omega.ger(e2 / nf, &pr, &pr, 1.0);
        omega.ger(-e2 / nf, &mr, &mr, 1.0);
    }
    let v_f = &sigma_inv * omega * sigma_inv.transpose();

    let mut gamma_bar = DVector::zeros(k);
    let mut m_hat = DMatrix::zeros(k, p);
    for (c, &j) in retained.iter().enumerate() {
        gamma_bar[j] = gamma_bar_r[c];
        m_hat.row_mut(j).copy_from(&m_r.row(c));
    }

    let q = z_quantile(level);
    let g = z_grid.len();
    let mut out = FInference {
        z_grid: z_grid.to_vec(),
        f_hat: Vec::with_capacity(g),
        f_bar: Vec::with_capacity(g),
        sigma_z: Vec::with_capacity(g),
        clamped: Vec::with_capacity(g),
        ci_low: Vec::with_capacity(g),
        ci_high: Vec::with_capacity(g),
        level,
        n,
        bound: used_bound,
        m_hat,
        gamma_bar,
    };
    for &z in z_grid {
        let full = basis.eval(z);
        let pz = DVector::from_iterator(kr, retained.iter().map(|&j| full[j]));
        let fb = pz.dot(&gamma_bar_r);
        let var = pz.dot(&(&v_f * &pz));
        let clamp = var < 0.0;
        if clamp {
            log::debug!("event=negative_variance_clamped z={z} value={var:.3e}");
        }
        let sd = var.max(0.0).sqrt();
        let half = q * sd / nf.sqrt();
        out.f_hat.push(full.dot(&fit.gamma_hat));
        out.f_bar.push(fb);
        out.sigma_z.push(sd);
        out.clamped.push(clamp || sd == 0.0);
        out.ci_low.push(fb - half);
        out.ci_high.push(fb + half);
    }
    Ok(out)
}

/// `g` equally spaced points between the 5% and 95% empirical quantiles.
pub fn central_grid(z: &[f64], g: usize) -> Vec<f64> {
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quant = |prob: f64| {
        let pos = prob * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    linspace(quant(0.05), quant(0.95), g)
}

pub fn linspace(lo: f64, hi: f64, g: usize) -> Vec<f64> {
    match g {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..g).map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub z: f64,
    pub f_bar: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sigma_z: f64,
}

/// Writes the band as CSV. Each preamble line is emitted as a `#` comment
/// before the header.
pub fn ci_band_export(inf: &FInference, path: impl AsRef<Path>, preamble: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_band(inf, &mut buf, preamble).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_band<W: Write>(inf: &FInference, out: &mut W, preamble: &[String]) -> std::io::Result<()> {
    for line in preamble {
        for part in line.lines() {
            writeln!(out, "# {part}")?;
        }
    }
    writeln!(out, "z,f_bar,ci_low,ci_high,sigma_z")?;
    for g in 0..inf.z_grid.len() {
        writeln!(
            out,
            "{},{},{},{},{}",
            inf.z_grid[g], inf.f_bar[g], inf.ci_low[g], inf.ci_high[g], inf.sigma_z[g]
        )?;
    }
    Ok(())
}

pub fn read_band(path: impl AsRef<Path>) -> Result<Vec<BandRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let rows: std::result::Result<Vec<BandRow>, _> = rdr.deserialize().collect();
    Ok(rows?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit_response, FitOptions, Penalty};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_sample(n: usize, p: usize, seed: u64) -> (Sample, DVector<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        let x = DMatrix::from_fn(n, p, |_, _| g());
        let z = DVector::from_fn(n, |_, _| g());
        let s = DVector::from_fn(n, |i, _| x[(i, 0)] + z[i].exp() + g());
        let d: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        (Sample::new(s.clone(), d, x, z).unwrap(), s)
    }

    #[test]
    fn zero_residuals_give_plug_in() {
        let (sample, s) = random_sample(80, 4, 1);
        let design = SieveDesign::new(&sample, 3).unwrap();
        let mut fit = fit_response(&sample, &design, &s, &FitOptions { degree: 3, ..Default::default() }).unwrap();
        fit.residuals.fill(0.0);
        let inf = debias_beta(&design, &fit, &[1.0, 0.0, 0.0, 0.0], &Bound::default(), 0.9).unwrap();
        assert_eq!(inf.t_hat, fit.beta_hat[0]);
        assert_eq!(inf.v_beta_hat, 0.0);
        let grid = [-0.5, 0.0, 0.5];
        let f = debias_f(&sample, &design, &fit, &grid, &Bound::default(), 0.9).unwrap();
        for g in 0..3 {
            assert_abs_diff_eq!(f.f_bar[g], fit.f_hat(grid[g]), epsilon = 1e-10);
            assert!(f.clamped[g]);
        }
    }

    #[test]
    fn zero_xi_is_rejected() {
        let (sample, s) = random_sample(60, 3, 2);
        let design = SieveDesign::new(&sample, 2).unwrap();
        let fit = fit_response(&sample, &design, &s, &FitOptions { degree: 2, ..Default::default() }).unwrap();
        assert!(matches!(debias_beta(&design, &fit, &[0.0; 3], &Bound::default(), 0.9), Err(Error::ZeroXi)));
    }

    #[test]
    fn level_nesting() {
        let (sample, s) = random_sample(120, 5, 3);
        let design = SieveDesign::new(&sample, 3).unwrap();
        let fit = fit_response(&sample, &design, &s, &FitOptions { degree: 3, penalty: Penalty::Auto(1.0), tol: 1e-10 }).unwrap();
        let b90 = debias_beta(&design, &fit, &[1.0, 0.0, 0.0, 0.0, 0.0], &Bound::default(), 0.9).unwrap();
        let b95 = b90.at_level(0.95);
        assert!(b95.ci_low <= b90.ci_low && b95.ci_high >= b90.ci_high);
        let f90 = debias_f(&sample, &design, &fit, &linspace(-1.0, 1.0, 5), &Bound::default(), 0.9).unwrap();
        let f95 = f90.at_level(0.95);
        for g in 0..5 {
            assert!(f95.ci_low[g] <= f90.ci_low[g] && f95.ci_high[g] >= f90.ci_high[g]);
            assert!(f90.sigma_z[g] > 0.0);
        }
    }

    #[test]
    fn band_round_trip() {
        let (sample, s) = random_sample(100, 3, 4);
        let design = SieveDesign::new(&sample, 2).unwrap();
        let fit = fit_response(&sample, &design, &s, &FitOptions { degree: 2, ..Default::default() }).unwrap();
        let f = debias_f(&sample, &design, &fit, &[-0.3, 0.1, 0.7], &Bound::default(), 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("band.csv");
        ci_band_export(&f, &path, &["version=0".to_string()]).unwrap();
        let rows = read_band(&path).unwrap();
        assert_eq!(rows.len(), 3);
        let q = z_quantile(0.9);
        for (g, r) in rows.iter().enumerate() {
            assert_eq!(r.z, f.z_grid[g]);
            assert_eq!(r.f_bar, f.f_bar[g]);
            assert_eq!(r.ci_low, f.ci_low[g]);
            assert_eq!(r.sigma_z, f.sigma_z[g]);
            assert_abs_diff_eq!(r.ci_high - r.f_bar, q * r.sigma_z / 10.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn grids() {
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        let z: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let g = central_grid(&z, 2);
        assert_abs_diff_eq!(g[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 95.0, epsilon = 1e-12);
    }
}
