//! Sample statistics used by the Monte Carlo harnesses.

use alloc::vec::Vec;
use libm::sqrt;

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    Estimate {
        mean: mean(xs),
        std_error: if n < 2 {
            0.0
        } else {
            sqrt(variance(xs) / n as f64)
        },
    }
}

/// Sample variance with the standard error of the variance estimator,
/// `sqrt((m4 - s^4) / n)`.
pub fn variance_se(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = variance(xs);
    let m4 = xs
        .iter()
        .map(|x| {
            let e = (x - m) * (x - m);
            e * e
        })
        .sum::<f64>()
        / n;
    Estimate {
        mean: s2,
        std_error: sqrt(((m4 - s2 * s2) / n).max(0.0)),
    }
}

/// Component-wise mean and standard error of `n` samples of dimension `d`
/// stored row-major.
pub fn mean_se_rows(rows: &[f64], d: usize) -> Vec<Estimate> {
    let n = rows.len() / d;
    (0..d)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|i| rows[i * d + c]).collect();
            mean_se(&col)
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| libm::log(*x)).collect();
    let ly: Vec<f64> = ys.iter().map(|y| libm::log(*y)).collect();
    let mx = mean(&lx);
    let my = mean(&ly);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}
