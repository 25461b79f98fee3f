//! Rolling-window evaluation: horizon-wise RMSE, calibration backtests,
//! synthetic series generation, and an ablation suite that compares model
//! variants against the harmonic-regression baseline.

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{fit_harmonic_regression, BaselineError, HarmonicSpec};
use crate::features::FeatureSpec;
use crate::ingest::{
    make_pairs, split_and_normalize, Aggregation, HourlyRecord, IngestError,
    MultiResolutionDataset, RawSeries,
};
use crate::linalg::Mat;
use crate::model::{forward_sequence, ModelConfig, ModelParams};
use crate::train::{fit, prepare_sequence, TrainConfig, TrainError};
use crate::uncertainty::{
    estimate_residual_model, intervals, rejection_rates, RejectionReport, UncertaintyError,
};

/// Errors from evaluation runs.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid window spec: {0}")]
    InvalidWindowSpec(String),
    #[error("test split has {got} periods but the windows need {needed}")]
    InsufficientTestLength { needed: usize, got: usize },
    #[error("window horizon {expected} does not match dataset sub-periods {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("forecast matrix is {yhat_rows}x{yhat_cols} but actuals are {y_rows}x{y_cols}")]
    ShapeMismatch {
        yhat_rows: usize,
        yhat_cols: usize,
        y_rows: usize,
        y_cols: usize,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// Layout of the rolling evaluation: how many windows, how far apart
/// (in coarse periods), and how many sub-periods each one predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub n_windows: usize,
    /// Distance between consecutive window starts, in coarse periods;
    /// `1` tiles the test split with non-overlapping windows.
    pub stride: usize,
    /// Sub-periods predicted per window; must equal the dataset's `K`.
    pub horizon: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_windows == 0 {
            return Err(EvalError::InvalidWindowSpec("n_windows must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(EvalError::InvalidWindowSpec("stride must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(EvalError::InvalidWindowSpec("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Test-set position of each window's target period.
    fn positions(&self, test_len: usize) -> Result<Vec<usize>, EvalError> {
        self.validate()?;
        let needed = (self.n_windows - 1) * self.stride + 1;
        if test_len < needed {
            return Err(EvalError::InsufficientTestLength { needed, got: test_len });
        }
        Ok((0..self.n_windows).map(|w| w * self.stride).collect())
    }
}

/// Runs the model across the test split and collects one prediction per
/// window, de-normalized to physical units. For the window at position
/// `p` the recurrent state has been advanced over the preceding test
/// prefix using the observed coarse inputs; the prediction itself uses
/// the window's own coarse input and periodic features.
pub fn rolling_forecast(
    params: &ModelParams,
    cfg: &ModelConfig,
    fspec: &FeatureSpec,
    test: &MultiResolutionDataset,
    spec: &WindowSpec,
) -> Result<Mat, EvalError> {
    if spec.horizon != test.sub_periods {
        return Err(EvalError::HorizonMismatch {
            expected: spec.horizon,
            got: test.sub_periods,
        });
    }
    let positions = spec.positions(test.len())?;
    let (x0, feats, _) = prepare_sequence(test, fspec, cfg.use_fourier);
    let last = *positions.last().expect("at least one window");
    let trace = forward_sequence(params, cfg, &x0[..=last], &feats[..feats.len().min(last + 1)]);
    let k = test.sub_periods;
    let mut out = Mat::zeros(positions.len(), k);
    for (w, &p) in positions.iter().enumerate() {
        let yhat = &trace.y_hat[p];
        for h in 0..k {
            out[(w, h)] = test.stats.denormalize_y(yhat[(h, 0)]);
        }
    }
    Ok(out)
}

/// Observed values for the same windows, de-normalized to physical units.
pub fn window_actuals(
    test: &MultiResolutionDataset,
    spec: &WindowSpec,
) -> Result<Mat, EvalError> {
    if spec.horizon != test.sub_periods {
        return Err(EvalError::HorizonMismatch {
            expected: spec.horizon,
            got: test.sub_periods,
        });
    }
    let positions = spec.positions(test.len())?;
    let k = test.sub_periods;
    let mut out = Mat::zeros(positions.len(), k);
    for (w, &p) in positions.iter().enumerate() {
        for h in 0..k {
            out[(w, h)] = test.stats.denormalize_y(test.periods[p].y[h]);
        }
    }
    Ok(out)
}

/// Root-mean-square error per horizon over aligned `W x K` forecast and
/// actual matrices: `rmse_h = sqrt(mean_w (yhat_wh - y_wh)^2)`.
pub fn rmse_by_horizon(yhat: &Mat, y: &Mat) -> Result<Vec<f64>, EvalError> {
    if yhat.shape() != y.shape() || yhat.rows() == 0 {
        return Err(EvalError::ShapeMismatch {
            yhat_rows: yhat.rows(),
            yhat_cols: yhat.cols(),
            y_rows: y.rows(),
            y_cols: y.cols(),
        });
    }
    let w = yhat.rows() as f64;
    let mut out = vec![0.0; yhat.cols()];
    for t in 0..yhat.rows() {
        for (h, acc) in out.iter_mut().enumerate() {
            let d = yhat[(t, h)] - y[(t, h)];
            *acc += d * d;
        }
    }
    for acc in &mut out {
        *acc = (*acc / w).sqrt();
    }
    Ok(out)
}

/// Arithmetic mean of the per-horizon RMSE values.
pub fn mean_rmse(rmse: &[f64]) -> f64 {
    assert!(!rmse.is_empty(), "mean over empty RMSE vector");
    rmse.iter().sum::<f64>() / rmse.len() as f64
}

/// One sinusoidal component of a synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthHarmonic {
    pub amplitude: f64,
    /// Period in hours.
    pub period: f64,
    /// Phase offset in hours.
    pub phase: f64,
}

/// Recipe for a synthetic hourly load series: level + trend + harmonics
/// + seeded Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub level: f64,
    /// Linear trend per hour.
    pub slope: f64,
    pub harmonics: Vec<SynthHarmonic>,
    pub noise_sd: f64,
    pub n_days: usize,
    pub seed: u64,
}

/// Deterministic synthetic hourly series; hour `t` carries
/// `level + slope*t + sum_i amp_i * sin(2*pi*(t + phase_i)/period_i)`
/// plus `noise_sd` times a seeded standard normal draw.
pub fn synth_generate(spec: &SynthSpec) -> RawSeries {
    assert!(spec.n_days >= 2, "synthetic series needs at least 2 days");
    let start = NaiveDate::from_ymd_opt(2021, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_days * 24;
    let mut records = Vec::with_capacity(n);
    for t in 0..n {
        let tf = t as f64;
        let mut v = spec.level + spec.slope * tf;
        for h in &spec.harmonics {
            v += h.amplitude * (std::f64::consts::TAU * (tf + h.phase) / h.period).sin();
        }
        let noise: f64 = StandardNormal.sample(&mut rng);
        v += spec.noise_sd * noise;
        records.push(HourlyRecord { timestamp: start + Duration::hours(t as i64), load: v });
    }
    RawSeries { records, region_id: "synthetic".into() }
}

/// Model variants compared by the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Recurrent backbone alone: no seasonal branch, no attention.
    SimpleRnn,
    /// Backbone plus the gated attention refinement.
    RnnAttn,
    /// Full model: seasonal branch and attention.
    FourierRnn,
    /// Least-squares harmonic regression (no neural network).
    HarmonicBaseline,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::SimpleRnn, Variant::RnnAttn, Variant::FourierRnn, Variant::HarmonicBaseline]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::SimpleRnn => "simple_rnn",
            Variant::RnnAttn => "rnn_attn",
            Variant::FourierRnn => "fourier_rnn",
            Variant::HarmonicBaseline => "harmonic_baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple_rnn" => Ok(Variant::SimpleRnn),
            "rnn_attn" => Ok(Variant::RnnAttn),
            "fourier_rnn" => Ok(Variant::FourierRnn),
            "harmonic_baseline" => Ok(Variant::HarmonicBaseline),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

/// Evaluation result for one variant and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub rmse_by_horizon: Vec<f64>,
    pub mean_rmse: f64,
    pub rejection: RejectionReport,
    /// Hex SHA-256 of the run configuration; together with `seed` this
    /// identifies the run bit-exactly.
    pub config_hash: String,
}

/// Hex SHA-256 over the canonical JSON serialization of a config value.
pub fn config_fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Everything the ablation suite needs besides the raw series: data
/// preparation choices, the shared architecture and training budget, the
/// window layout, and the interval level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Sub-periods per coarse period (24 for daily periods).
    pub k: usize,
    pub train_fraction: f64,
    pub aggregation: Aggregation,
    pub features: FeatureSpec,
    /// Shared architecture; the ablation flags and `feat_width` are
    /// overridden per variant.
    pub model: ModelConfig,
    /// Shared training budget; the seed is overridden per run.
    pub train: TrainConfig,
    pub windows: WindowSpec,
    pub alpha: f64,
    pub baseline: HarmonicSpec,
}

impl AblationConfig {
    /// Architecture for one variant: ablation flags set, feature width
    /// matched to the feature spec only when the seasonal branch is on.
    pub fn model_for(&self, variant: Variant) -> ModelConfig {
        let mut cfg = self.model.clone();
        match variant {
            Variant::SimpleRnn => {
                cfg.use_fourier = false;
                cfg.use_attention = false;
                cfg.feat_width = 0;
            }
            Variant::RnnAttn => {
                cfg.use_fourier = false;
                cfg.use_attention = true;
                cfg.feat_width = 0;
            }
            Variant::FourierRnn => {
                cfg.use_fourier = true;
                cfg.use_attention = true;
                cfg.feat_width = self.features.feat_width();
            }
            Variant::HarmonicBaseline => {}
        }
        cfg
    }
}

/// One entry of the suite output: either a report or the failure text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub variant: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Builds the report shared by all variants: horizon-wise RMSE over the
/// test windows plus interval calibration, where the residual model is
/// fitted on training-split forecasts and backtested on the windows.
#[allow(clippy::too_many_arguments)]
fn report_from_forecasts(
    variant: &str,
    seed: u64,
    config_hash: String,
    yhat_train: &Mat,
    y_train: &Mat,
    yhat_windows: &Mat,
    y_windows: &Mat,
    alpha: f64,
) -> Result<EvalReport, EvalError> {
    let rmse = rmse_by_horizon(yhat_windows, y_windows)?;
    let mean = mean_rmse(&rmse);
    let rm = estimate_residual_model(y_train, yhat_train)?;
    let mut sets = Vec::with_capacity(yhat_windows.rows());
    for w in 0..yhat_windows.rows() {
        sets.push(intervals(yhat_windows.row(w), &rm, alpha)?);
    }
    let rejection = rejection_rates(y_windows, &sets);
    Ok(EvalReport {
        variant: variant.to_string(),
        seed,
        rmse_by_horizon: rmse,
        mean_rmse: mean,
        rejection,
        config_hash,
    })
}

/// De-normalized per-period forecasts and actuals for a full dataset
/// pass with the given model.
fn dataset_forecasts(
    params: &ModelParams,
    cfg: &ModelConfig,
    fspec: &FeatureSpec,
    data: &MultiResolutionDataset,
) -> (Mat, Mat) {
    let (x0, feats, _) = prepare_sequence(data, fspec, cfg.use_fourier);
    let trace = forward_sequence(params, cfg, &x0, &feats);
    let k = data.sub_periods;
    let mut yhat = Mat::zeros(data.len(), k);
    let mut y = Mat::zeros(data.len(), k);
    for t in 0..data.len() {
        for h in 0..k {
            yhat[(t, h)] = data.stats.denormalize_y(trace.y_hat[t][(h, 0)]);
            y[(t, h)] = data.stats.denormalize_y(data.periods[t].y[h]);
        }
    }
    (yhat, y)
}

/// Evaluates an already-trained model: rolling forecasts over the test
/// split, RMSE per horizon, and interval calibration with residuals
/// estimated on the training split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    params: &ModelParams,
    cfg: &ModelConfig,
    fspec: &FeatureSpec,
    train_ds: &MultiResolutionDataset,
    test_ds: &MultiResolutionDataset,
    windows: &WindowSpec,
    alpha: f64,
    variant: &str,
    seed: u64,
    config_hash: String,
) -> Result<EvalReport, EvalError> {
    let (yhat_train, y_train) = dataset_forecasts(params, cfg, fspec, train_ds);
    let yhat_windows = rolling_forecast(params, cfg, fspec, test_ds, windows)?;
    let y_windows = window_actuals(test_ds, windows)?;
    report_from_forecasts(
        variant,
        seed,
        config_hash,
        &yhat_train,
        &y_train,
        &yhat_windows,
        &y_windows,
        alpha,
    )
}

/// Fits the harmonic-regression baseline on the training split (physical
/// units, absolute hour axis) and evaluates it on the same windows as
/// the model variants.
pub fn evaluate_baseline(
    hspec: &HarmonicSpec,
    train_ds: &MultiResolutionDataset,
    test_ds: &MultiResolutionDataset,
    windows: &WindowSpec,
    alpha: f64,
    seed: u64,
    config_hash: String,
) -> Result<EvalReport, EvalError> {
    let k = train_ds.sub_periods;
    let mut t_axis = Vec::with_capacity(train_ds.len() * k);
    let mut values = Vec::with_capacity(train_ds.len() * k);
    for p in &train_ds.periods {
        for h in 0..k {
            t_axis.push((p.index * k as i64 + h as i64) as f64);
            values.push(train_ds.stats.denormalize_y(p.y[h]));
        }
    }
    let fit = fit_harmonic_regression(&t_axis, &values, hspec)?;

    let predict_periods = |ds: &MultiResolutionDataset, positions: &[usize]| {
        let mut yhat = Mat::zeros(positions.len(), k);
        for (w, &pos) in positions.iter().enumerate() {
            let p = &ds.periods[pos];
            for h in 0..k {
                yhat[(w, h)] = fit.predict((p.index * k as i64 + h as i64) as f64);
            }
        }
        yhat
    };

    let train_positions: Vec<usize> = (0..train_ds.len()).collect();
    let yhat_train = predict_periods(train_ds, &train_positions);
    let mut y_train = Mat::zeros(train_ds.len(), k);
    for (t, p) in train_ds.periods.iter().enumerate() {
        for h in 0..k {
            y_train[(t, h)] = train_ds.stats.denormalize_y(p.y[h]);
        }
    }

    let positions = windows.positions(test_ds.len())?;
    if windows.horizon != test_ds.sub_periods {
        return Err(EvalError::HorizonMismatch {
            expected: windows.horizon,
            got: test_ds.sub_periods,
        });
    }
    let yhat_windows = predict_periods(test_ds, &positions);
    let y_windows = window_actuals(test_ds, windows)?;
    report_from_forecasts(
        "harmonic_baseline",
        seed,
        config_hash,
        &yhat_train,
        &y_train,
        &yhat_windows,
        &y_windows,
        alpha,
    )
}

/// Trains and evaluates every requested variant with every seed on the
/// same chronological split. A variant run that fails (for example by
/// diverging) is recorded with its error text and the suite continues.
pub fn run_ablation_suite(
    raw: &RawSeries,
    cfg: &AblationConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<AblationOutcome>, EvalError> {
    let pairs = make_pairs(raw, cfg.k, cfg.aggregation)?;
    let (train_ds, test_ds) = split_and_normalize(&pairs, cfg.train_fraction, cfg.k)?;
    let mut outcomes = Vec::with_capacity(seeds.len() * variants.len());
    for &variant in variants {
        for &seed in seeds {
            let hash = config_fingerprint(&(cfg, variant.name(), seed));
            let result = run_one_variant(variant, seed, hash, cfg, &train_ds, &test_ds);
            outcomes.push(match result {
                Ok(report) => AblationOutcome {
                    variant: variant.name().into(),
                    seed,
                    report: Some(report),
                    error: None,
                },
                Err(err) => AblationOutcome {
                    variant: variant.name().into(),
                    seed,
                    report: None,
                    error: Some(err.to_string()),
                },
            });
        }
    }
    Ok(outcomes)
}

fn run_one_variant(
    variant: Variant,
    seed: u64,
    config_hash: String,
    cfg: &AblationConfig,
    train_ds: &MultiResolutionDataset,
    test_ds: &MultiResolutionDataset,
) -> Result<EvalReport, EvalError> {
    if variant == Variant::HarmonicBaseline {
        return evaluate_baseline(
            &cfg.baseline,
            train_ds,
            test_ds,
            &cfg.windows,
            cfg.alpha,
            seed,
            config_hash,
        );
    }
    let model_cfg = cfg.model_for(variant);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let (params, _history) = fit(train_ds, &model_cfg, &cfg.features, &train_cfg)?;
    evaluate_model(
        &params,
        &model_cfg,
        &cfg.features,
        train_ds,
        test_ds,
        &cfg.windows,
        cfg.alpha,
        variant.name(),
        seed,
        config_hash,
    )
}
