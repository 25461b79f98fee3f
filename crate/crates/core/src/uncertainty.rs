//! Residual-Gaussian uncertainty quantification.
//!
//! Forecast errors on held-out data are modeled as draws from a fixed
//! multivariate Gaussian over the `K` horizons of one coarse period:
//! [`estimate_residual_model`] fits the mean residual vector and the
//! unbiased sample covariance, [`intervals`] turns a point forecast into
//! per-horizon prediction intervals at a chosen confidence level, and
//! [`rejection_rates`] backtests those intervals by counting how often
//! observed values fall outside them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{min_symmetric_eigenvalue, Mat};

/// Errors from residual modeling and interval construction.
#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("residual estimation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: actuals are {y_rows}x{y_cols} but forecasts are {yhat_rows}x{yhat_cols}")]
    ShapeMismatch {
        y_rows: usize,
        y_cols: usize,
        yhat_rows: usize,
        yhat_cols: usize,
    },
    #[error("confidence parameter alpha must lie strictly between 0 and 1, got {0}")]
    BadAlpha(f64),
    #[error("forecast has {got} horizons but the residual model has {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("variance at horizon {horizon} is {value:e}; must be finite and nonnegative")]
    BadVariance { horizon: usize, value: f64 },
    #[error("covariance is not symmetric: entries ({i},{j}) and ({j},{i}) differ by {diff:e}")]
    Asymmetric { i: usize, j: usize, diff: f64 },
}

/// Gaussian model of per-period forecast residuals: the mean residual
/// vector, the unbiased sample covariance across horizons, and the number
/// of periods it was estimated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualModel {
    /// Mean residual per horizon, length `K`.
    pub mean_r: Vec<f64>,
    /// Unbiased sample covariance of the residuals, `K x K`.
    pub sigma: Mat,
    /// Number of residual vectors the estimate is based on.
    pub n_samples: usize,
}

impl ResidualModel {
    /// Number of horizons `K` the model covers.
    pub fn width(&self) -> usize {
        self.mean_r.len()
    }

    /// Checks the structural invariants: at least two samples, covariance
    /// square and symmetric within 1e-12, and a nonnegative diagonal.
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        if self.n_samples < 2 {
            return Err(UncertaintyError::TooFewSamples(self.n_samples));
        }
        let k = self.width();
        if self.sigma.shape() != (k, k) {
            return Err(UncertaintyError::ShapeMismatch {
                y_rows: k,
                y_cols: k,
                yhat_rows: self.sigma.rows(),
                yhat_cols: self.sigma.cols(),
            });
        }
        for i in 0..k {
            for j in i + 1..k {
                let diff = (self.sigma[(i, j)] - self.sigma[(j, i)]).abs();
                if diff > 1e-12 {
                    return Err(UncertaintyError::Asymmetric { i, j, diff });
                }
            }
        }
        for h in 0..k {
            let v = self.sigma[(h, h)];
            if !v.is_finite() || v < 0.0 {
                return Err(UncertaintyError::BadVariance { horizon: h, value: v });
            }
        }
        Ok(())
    }

    /// True when the covariance is positive semidefinite up to numerical
    /// tolerance: its smallest eigenvalue is at least `-1e-10 * trace`.
    pub fn covariance_is_psd(&self) -> bool {
        if self.sigma.rows() == 0 {
            return true;
        }
        let trace: f64 = (0..self.sigma.rows()).map(|i| self.sigma[(i, i)]).sum();
        min_symmetric_eigenvalue(&self.sigma) >= -1e-10 * trace.max(0.0)
    }
}

/// Per-horizon prediction intervals at confidence level `1 - alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    /// Lower bound per horizon.
    pub lower: Vec<f64>,
    /// Upper bound per horizon.
    pub upper: Vec<f64>,
    /// Miscoverage level the bounds were built for.
    pub alpha: f64,
}

impl IntervalSet {
    /// Number of horizons.
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Whether `value` lies inside the closed interval at horizon `h`.
    pub fn contains(&self, h: usize, value: f64) -> bool {
        value >= self.lower[h] && value <= self.upper[h]
    }

    /// Half the interval width at horizon `h`.
    pub fn half_width(&self, h: usize) -> f64 {
        0.5 * (self.upper[h] - self.lower[h])
    }
}

/// Backtest summary: the fraction of evaluation windows whose actual
/// value fell outside the prediction interval, per horizon and aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    /// Rejection rate per horizon, length `K`.
    #[serde(rename = "per_h")]
    pub per_horizon: Vec<f64>,
    /// Arithmetic mean of the per-horizon rates.
    pub mean: f64,
    /// Largest per-horizon rate.
    pub max: f64,
    /// Smallest per-horizon rate.
    pub min: f64,
}

impl RejectionReport {
    /// Builds the summary statistics from per-horizon rates.
    pub fn from_rates(per_horizon: Vec<f64>) -> Self {
        assert!(!per_horizon.is_empty(), "rejection report needs at least one horizon");
        let mean = per_horizon.iter().sum::<f64>() / per_horizon.len() as f64;
        let max = per_horizon.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = per_horizon.iter().copied().fold(f64::INFINITY, f64::min);
        RejectionReport { per_horizon, mean, max, min }
    }
}

/// Fits a [`ResidualModel`] from aligned actuals and forecasts, both
/// `N x K` with one row per evaluation period. Residuals are
/// `r_t = y_t - yhat_t`; the covariance uses the unbiased `1/(N-1)`
/// normalization and is symmetric by construction.
pub fn estimate_residual_model(y: &Mat, yhat: &Mat) -> Result<ResidualModel, UncertaintyError> {
    if y.shape() != yhat.shape() {
        return Err(UncertaintyError::ShapeMismatch {
            y_rows: y.rows(),
            y_cols: y.cols(),
            yhat_rows: yhat.rows(),
            yhat_cols: yhat.cols(),
        });
    }
    let n = y.rows();
    let k = y.cols();
    assert!(k >= 1, "residual estimation needs at least one horizon");
    if n < 2 {
        return Err(UncertaintyError::TooFewSamples(n));
    }
    let r = y.sub(yhat);
    let mut mean_r = vec![0.0; k];
    for t in 0..n {
        for h in 0..k {
            mean_r[h] += r[(t, h)];
        }
    }
    for m in &mut mean_r {
        *m /= n as f64;
    }
    let mut sigma = Mat::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let mut acc = 0.0;
            for t in 0..n {
                acc += (r[(t, i)] - mean_r[i]) * (r[(t, j)] - mean_r[j]);
            }
            let v = acc / (n - 1) as f64;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(ResidualModel { mean_r, sigma, n_samples: n })
}

/// Builds marginal per-horizon prediction intervals around a point
/// forecast. Each interval is centered at `yhat_h + mean_r_h` (the
/// bias-corrected forecast) with half-width
/// `z_{1-alpha/2} * sqrt(sigma_hh)`.
pub fn intervals(
    yhat: &[f64],
    model: &ResidualModel,
    alpha: f64,
) -> Result<IntervalSet, UncertaintyError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UncertaintyError::BadAlpha(alpha));
    }
    if yhat.len() != model.width() {
        return Err(UncertaintyError::WidthMismatch {
            got: yhat.len(),
            expected: model.width(),
        });
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let k = yhat.len();
    let mut lower = vec![0.0; k];
    let mut upper = vec![0.0; k];
    for h in 0..k {
        let var = model.sigma[(h, h)];
        if !var.is_finite() || var < 0.0 {
            return Err(UncertaintyError::BadVariance { horizon: h, value: var });
        }
        let center = yhat[h] + model.mean_r[h];
        let half = z * var.sqrt();
        lower[h] = center - half;
        upper[h] = center + half;
    }
    Ok(IntervalSet { lower, upper, alpha })
}

/// Backtests prediction intervals: `y_test` is `W x K` with one row per
/// evaluation window and `sets` holds the matching interval set for each
/// window. The rate at horizon `h` is the fraction of windows whose
/// actual value falls strictly outside `[lower_h, upper_h]`.
pub fn rejection_rates(y_test: &Mat, sets: &[IntervalSet]) -> RejectionReport {
    let w = y_test.rows();
    let k = y_test.cols();
    assert!(w >= 1, "rejection rates need at least one window");
    assert_eq!(sets.len(), w, "need exactly one interval set per window");
    let mut per = vec![0.0; k];
    for (t, set) in sets.iter().enumerate() {
        assert_eq!(set.len(), k, "interval set width mismatch at window {t}");
        for (h, rate) in per.iter_mut().enumerate() {
            if !set.contains(h, y_test[(t, h)]) {
                *rate += 1.0;
            }
        }
    }
    for rate in &mut per {
        *rate /= w as f64;
    }
    RejectionReport::from_rates(per)
}

// Coefficient tables for the inverse normal CDF (Wichura's algorithm
// AS 241, PPND16 variant): one rational approximation for the central
// region and two for the tails. The published digits exceed f64
// resolution and are kept verbatim.
#[allow(clippy::excessive_precision)]
const CENTRAL_NUM: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
#[allow(clippy::excessive_precision)]
const CENTRAL_DEN: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
#[allow(clippy::excessive_precision)]
const MIDTAIL_NUM: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
#[allow(clippy::excessive_precision)]
const MIDTAIL_DEN: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
#[allow(clippy::excessive_precision)]
const FARTAIL_NUM: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
#[allow(clippy::excessive_precision)]
const FARTAIL_DEN: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn rational(num: &[f64; 8], den: &[f64; 8], r: f64) -> f64 {
    let mut n = num[7];
    for c in num[..7].iter().rev() {
        n = n * r + c;
    }
    let mut d = den[7];
    for c in den[..7].iter().rev() {
        d = d * r + c;
    }
    n / d
}

/// Quantile function (inverse CDF) of the standard normal distribution,
/// evaluated with Wichura's AS 241 rational approximations. Accurate to
/// roughly full double precision, far inside the 1e-9 needed for exact
/// interval-width tests.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(
        p.is_finite() && p > 0.0 && p < 1.0,
        "normal_quantile needs p strictly inside (0, 1), got {p}"
    );
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * rational(&CENTRAL_NUM, &CENTRAL_DEN, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        rational(&MIDTAIL_NUM, &MIDTAIL_DEN, r - 1.6)
    } else {
        rational(&FARTAIL_NUM, &FARTAIL_DEN, r - 5.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
