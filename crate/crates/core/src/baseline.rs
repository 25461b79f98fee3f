//! Harmonic-regression baseline: a linear trend plus sin/cos terms at
//! configured periods, fitted by ordinary least squares. Serves both as a
//! standalone forecasting baseline and as the coarse base downscaler in
//! hierarchical pipelines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::HarmonicBlock;
use crate::linalg::{cholesky_solve, Mat};

/// Errors from fitting the harmonic regression.
#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("time and value series have different lengths: {t_len} vs {y_len}")]
    LengthMismatch { t_len: usize, y_len: usize },
    #[error("need at least {needed} observations to fit {needed} coefficients, got {got}")]
    TooFewObservations { got: usize, needed: usize },
    #[error("normal equations are singular; the harmonic design is degenerate")]
    SingularDesign,
}

/// Shape of the regression basis: one sin/cos pair per harmonic of each
/// periodic block, plus an intercept and an optional linear trend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSpec {
    /// Periodic components; `period` is measured in the same unit as the
    /// time axis passed to [`fit_harmonic_regression`].
    pub blocks: Vec<HarmonicBlock>,
    /// Include a linear trend column in addition to the intercept.
    pub include_trend: bool,
}

impl HarmonicSpec {
    /// Number of regression coefficients.
    pub fn n_coefficients(&self) -> usize {
        let harmonic_terms: usize = self.blocks.iter().map(|b| 2 * b.harmonics).sum();
        1 + usize::from(self.include_trend) + harmonic_terms
    }
}

/// A fitted harmonic regression. The trend column is standardized during
/// fitting (`(t - t_center) / t_scale`) to keep the normal equations well
/// conditioned; predictions undo the standardization transparently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicFit {
    pub spec: HarmonicSpec,
    /// Coefficients in design order: intercept, trend (if enabled), then
    /// interleaved (sin, cos) pairs per harmonic per block.
    pub coef: Vec<f64>,
    t_center: f64,
    t_scale: f64,
}

impl HarmonicFit {
    /// Evaluates the fitted curve at time `t`.
    pub fn predict(&self, t: f64) -> f64 {
        let row = design_row(&self.spec, t, self.t_center, self.t_scale);
        row.iter().zip(&self.coef).map(|(x, c)| x * c).sum()
    }

    /// Evaluates the fitted curve at each of the given times.
    pub fn predict_many(&self, ts: &[f64]) -> Vec<f64> {
        ts.iter().map(|&t| self.predict(t)).collect()
    }
}

/// One row of the design matrix at time `t`. Harmonic angles use the raw
/// time so periodicity stays anchored to the absolute axis; only the
/// trend column is standardized.
fn design_row(spec: &HarmonicSpec, t: f64, t_center: f64, t_scale: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(spec.n_coefficients());
    row.push(1.0);
    if spec.include_trend {
        row.push((t - t_center) / t_scale);
    }
    for block in &spec.blocks {
        for k in 1..=block.harmonics {
            let angle = std::f64::consts::TAU * k as f64 * t / block.period;
            row.push(angle.sin());
            row.push(angle.cos());
        }
    }
    row
}

/// Fits the regression by solving the normal equations with a Cholesky
/// factorization. `t` and `y` are aligned samples of the series on an
/// arbitrary (not necessarily uniform) time axis.
pub fn fit_harmonic_regression(
    t: &[f64],
    y: &[f64],
    spec: &HarmonicSpec,
) -> Result<HarmonicFit, BaselineError> {
    if t.len() != y.len() {
        return Err(BaselineError::LengthMismatch { t_len: t.len(), y_len: y.len() });
    }
    let d = spec.n_coefficients();
    if t.len() < d {
        return Err(BaselineError::TooFewObservations { got: t.len(), needed: d });
    }
    let n = t.len();
    let t_center = t.iter().sum::<f64>() / n as f64;
    let t_scale = t
        .iter()
        .map(|&v| (v - t_center).abs())
        .fold(0.0_f64, f64::max)
        .max(1.0);

    // Accumulate X^T X and X^T y one observation at a time; d is small.
    let mut xtx = Mat::zeros(d, d);
    let mut xty = vec![0.0; d];
    for (&ti, &yi) in t.iter().zip(y) {
        let row = design_row(spec, ti, t_center, t_scale);
        for i in 0..d {
            xty[i] += row[i] * yi;
            for j in i..d {
                xtx[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
    }
    let coef = cholesky_solve(&xtx, &xty).ok_or(BaselineError::SingularDesign)?;
    Ok(HarmonicFit { spec: spec.clone(), coef, t_center, t_scale })
}
