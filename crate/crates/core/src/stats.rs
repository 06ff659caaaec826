//! Sample statistics used by the Monte Carlo estimators. All reductions run
//! sequentially over slices so results never depend on scheduling.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (two-pass).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n - 1) as f64
}

pub fn mean_stderr(xs: &[f64]) -> MeanStderr {
    let n = xs.len();
    MeanStderr {
        mean: mean(xs),
        stderr: (variance(xs) / n as f64).sqrt(),
        n,
    }
}

/// Ratio estimator `Σ w y / Σ w` with its delta-method standard error.
pub fn ratio_estimate(w: &[f64], y: &[f64]) -> MeanStderr {
    let n = w.len();
    let wy: Vec<f64> = w.iter().zip(y).map(|(a, b)| a * b).collect();
    let mw = mean(w);
    let r = mean(&wy) / mw;
    let resid: Vec<f64> = w.iter().zip(&wy).map(|(a, b)| b - r * a).collect();
    let se = (variance(&resid) / n as f64).sqrt() / mw.abs();
    MeanStderr {
        mean: r,
        stderr: se,
        n,
    }
}

/// Kish effective sample size `(Σw)²/Σw²`.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Ordinary least-squares slope of `y` on `x` (with intercept).
pub fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    covariance(x, y) / variance(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residual_norm: f64,
    /// `‖y - ŷ‖ / ‖ŷ‖`.
    pub relative_residual: f64,
}

/// Least squares without intercept, `y ≈ X c`, rows of `X` given as slices.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Option<LinearFit> {
    let p = rows.first()?.len();
    let x = nalgebra::DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let yv = nalgebra::DVector::from_column_slice(y);
    let svd = x.clone().svd(true, true);
    let c = svd.solve(&yv, 1e-12).ok()?;
    let fitted = &x * &c;
    let residual_norm = (&yv - &fitted).norm();
    let fnorm = fitted.norm();
    Some(LinearFit {
        coefficients: c.iter().cloned().collect(),
        fitted: fitted.iter().cloned().collect(),
        residual_norm,
        relative_residual: if fnorm > 0.0 {
            residual_norm / fnorm
        } else {
            f64::INFINITY
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stderr() {
        let s = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ratio_with_unit_weights_is_plain_mean() {
        let y = [1.0, 4.0, 2.0, 7.0];
        let r = ratio_estimate(&[1.0; 4], &y);
        let m = mean_stderr(&y);
        assert!((r.mean - m.mean).abs() < 1e-15);
        assert!((r.stderr - m.stderr).abs() < 1e-15);
    }

    #[test]
    fn exact_fit_has_zero_residual() {
        let rows: Vec<Vec<f64>> = (1..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] + 0.5 * r[1]).collect();
        let fit = least_squares(&rows, &y).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 0.5).abs() < 1e-10);
        assert!(fit.relative_residual < 1e-12);
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        assert!((regression_slope(&x, &y) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ess_bounds() {
        assert_eq!(effective_sample_size(&[1.0; 10]), 10.0);
        assert_eq!(effective_sample_size(&[0.0, 0.0, 5.0]), 1.0);
    }
}
