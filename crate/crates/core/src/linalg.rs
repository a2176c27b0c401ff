//! Small numerical helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided standard normal critical value for a confidence `level`.
pub fn z_quantile(level: f64) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf(0.5 * (1.0 + level))
}

pub fn standard_normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn std_dev(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Ratio of extreme singular values; infinite for singular input.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `(1/n) A'A` for a tall matrix.
pub fn scaled_gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = a.tr_mul(a) / a.nrows() as f64;
    // exact symmetry for downstream checks
    let m = g.nrows();
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Solves `a x = b` with full pivoting; `None` when `a` is singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().full_piv_lu().solve(b)
}

pub fn inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().full_piv_lu().try_inverse()
}
