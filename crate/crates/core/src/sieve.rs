//! Trigonometric sieve basis for the smooth covariate and the projection
//! onto its span.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance below which a basis column is treated as linearly
/// dependent on the columns kept before it.
pub const RANK_TOL: f64 = 1e-10;

/// Degree and normalization anchors of a trigonometric basis.
///
/// The basis has `2 * degree + 1` columns: a constant, then
/// `sqrt(2) cos(2 pi j t)` and `sqrt(2) sin(2 pi j t)` for `j = 1..=degree`,
/// where `t = (z - z_min) / (z_max - z_min)` clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub z_min: f64,
    pub z_max: f64,
}

impl BasisSpec {
    pub fn new(degree: usize, z_min: f64, z_max: f64) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidProblem("basis degree must be positive".into()));
        }
        if !(z_min < z_max) {
            return Err(Error::DegenerateZ);
        }
        Ok(BasisSpec { degree, z_min, z_max })
    }

    /// Number of basis functions, `2J + 1`.
    pub fn k(&self) -> usize {
        2 * self.degree + 1
    }

    pub fn normalize(&self, z: f64) -> f64 {
        ((z - self.z_min) / (self.z_max - self.z_min)).clamp(0.0, 1.0)
    }

    fn fill_row(&self, z: f64, out: &mut [f64]) {
        let t = self.normalize(z);
        out[0] = 1.0;
        for j in 1..=self.degree {
            let (s, c) = (2.0 * PI * j as f64 * t).sin_cos();
            out[2 * j - 1] = SQRT_2 * c;
            out[2 * j] = SQRT_2 * s;
        }
    }

    /// Basis row at a single point.
    pub fn eval(&self, z0: f64) -> DVector<f64> {
        let mut row = vec![0.0; self.k()];
        self.fill_row(z0, &mut row);
        DVector::from_vec(row)
    }

    /// Basis matrix with one row per entry of `z`.
    pub fn matrix(&self, z: &[f64]) -> DMatrix<f64> {
        let k = self.k();
        let mut row = vec![0.0; k];
        let mut m = DMatrix::zeros(z.len(), k);
        for (i, &zi) in z.iter().enumerate() {
            self.fill_row(zi, &mut row);
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }
}

/// Builds the sieve design for `z` with anchors at the sample extremes.
pub fn build_basis(z: &[f64], degree: usize) -> Result<(BasisSpec, DMatrix<f64>)> {
    let (lo, hi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo < hi) {
        return Err(Error::DegenerateZ);
    }
    let spec = BasisSpec::new(degree, lo, hi)?;
    if spec.k() >= z.len() {
        return Err(Error::BasisTooLarge { k: spec.k(), n: z.len() });
    }
    let psi = spec.matrix(z);
    Ok((spec, psi))
}

pub fn eval_basis(spec: &BasisSpec, z0: f64) -> DVector<f64> {
    spec.eval(z0)
}

/// Thin QR factorization of a sieve design with dependent columns removed.
///
/// `q` spans the retained columns, `r` is upper triangular with
/// `psi[:, retained] = q * r`.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    psi: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    retained: Vec<usize>,
    dropped: Vec<usize>,
}

impl ProjectionCache {
    pub fn new(psi: DMatrix<f64>) -> Result<Self> {
        let (n, k) = psi.shape();
        if k == 0 || n <= k {
            return Err(Error::BasisTooLarge { k, n });
        }
        let scale = psi.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        let mut q_cols: Vec<DVector<f64>> = Vec::with_capacity(k);
        let mut r_entries: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut retained = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..k {
            let mut v: DVector<f64> = psi.column(j).into_owned();
            let mut coeffs = vec![0.0; q_cols.len()];
            // two passes of modified Gram-Schmidt keep Q orthonormal to rounding
            for _ in 0..2 {
                for (c, q) in coeffs.iter_mut().zip(&q_cols) {
                    let h = q.dot(&v);
                    v.axpy(-h, q, 1.0);
                    *c += h;
                }
            }
            let norm = v.norm();
            if norm <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
                dropped.push(j);
                continue;
            }
            coeffs.push(norm);
            q_cols.push(v / norm);
            r_entries.push(coeffs);
            retained.push(j);
        }
        let rk = retained.len();
        let q = DMatrix::from_columns(&q_cols);
        let mut r = DMatrix::zeros(rk, rk);
        for (col, entries) in r_entries.iter().enumerate() {
            for (row, v) in entries.iter().enumerate() {
                r[(row, col)] = *v;
            }
        }
        let cache = ProjectionCache { psi, q, r, retained, dropped };
        let sv = cache.r.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > RANK_TOL * smax) {
            return Err(Error::DegenerateZ);
        }
        Ok(cache)
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.psi.nrows()
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// Splits `v` into its projection on the sieve span and the residual.
    pub fn project(&self, v: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        assert_eq!(v.nrows(), self.n(), "projection operand has wrong row count");
        let qt = self.q.transpose();
        let coef = &qt * v;
        let mut resid = v - &self.q * &coef;
        // second pass removes what rounding left in the sieve span
        let corr = &qt * &resid;
        resid -= &self.q * &corr;
        let proj = v - &resid;
        (proj, resid)
    }

    pub fn residualize_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let qtv = self.q.tr_mul(v);
        let mut resid = v - &self.q * qtv;
        let corr = self.q.tr_mul(&resid);
        resid -= &self.q * corr;
        resid
    }

    /// Least-squares coefficients of `y` on the full basis; dropped
    /// columns get zero.
    pub fn fit_coefficients(&self, y: &DVector<f64>) -> DVector<f64> {
        let qty = self.q.tr_mul(y);
        let sol = self
            .r
            .solve_upper_triangular(&qty)
            .expect("retained columns have a nonsingular triangular factor");
        let mut gamma = DVector::zeros(self.psi.ncols());
        for (i, &j) in self.retained.iter().enumerate() {
            gamma[j] = sol[i];
        }
        gamma
    }
}
