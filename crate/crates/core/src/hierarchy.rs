//! Hierarchical downscaling: chains of stage models that expand a coarse
//! series resolution by resolution (year to day to hour), trained with
//! blended real/predicted inputs, plus an RNN-enhanced combination of a
//! coarse base downscaler with a trained day-to-hour refiner.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::baseline::{BaselineError, HarmonicFit};
use crate::features::FeatureSpec;
use crate::ingest::{dataset_from_pairs, Aggregation, IngestError, RawPair, RawSeries, SplitTag};
use crate::linalg::Mat;
use crate::model::{forward_sequence, Checkpoint, ModelConfig, ModelError, CHECKPOINT_VERSION};
use crate::train::{fit, prepare_sequence, LossRecord, TrainConfig, TrainError};

/// Errors from pipeline construction, training, and inference.
#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("pipeline needs at least one stage")]
    EmptyPipeline,
    #[error("blend weight alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("blend inputs have different lengths: {truth} vs {predicted}")]
    BlendLengthMismatch { truth: usize, predicted: usize },
    #[error("stage '{name}' is inconsistent: {reason}")]
    BadStage { name: String, reason: String },
    #[error("stage '{name}' needs at least {needed} fine values to train, got {got}")]
    StageDataTooShort { name: String, needed: usize, got: usize },
    #[error("downscale input must be nonempty")]
    EmptyInput,
    #[error("base downscaler produced {got} daily values, expected {expected}")]
    BaseOutputLength { got: usize, expected: usize },
    #[error("pipeline file version {found} is not the supported {expected}")]
    PipelineVersion { found: u32, expected: u32 },
    #[error("failed to read or write pipeline file {path}: {source}")]
    PipelineIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse pipeline file {path}: {source}")]
    PipelineParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// Mixing weight for stage training inputs: `alpha` on the real coarse
/// values, `1 - alpha` on the upstream stage's predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub alpha: f64,
}

impl BlendConfig {
    pub fn validate(&self) -> Result<(), HierarchyError> {
        if !(0.0..=1.0).contains(&self.alpha) || self.alpha.is_nan() {
            return Err(HierarchyError::BadAlpha(self.alpha));
        }
        Ok(())
    }
}

/// Elementwise convex mix `alpha * truth + (1 - alpha) * predicted`.
pub fn blend(truth: &[f64], predicted: &[f64], alpha: f64) -> Result<Vec<f64>, HierarchyError> {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be validated upstream, got {alpha}");
    if truth.len() != predicted.len() {
        return Err(HierarchyError::BlendLengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    Ok(truth
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| alpha * t + (1.0 - alpha) * p)
        .collect())
}

/// Architecture and budget for one stage before training. `k_stage` is
/// the resolution expansion factor (365 for year-to-day, 24 for
/// day-to-hour) and must match both configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub k_stage: usize,
    pub model: ModelConfig,
    pub features: FeatureSpec,
    pub train: TrainConfig,
}

impl StagePlan {
    fn validate(&self) -> Result<(), HierarchyError> {
        let bad = |reason: String| {
            Err(HierarchyError::BadStage { name: self.name.clone(), reason })
        };
        if self.k_stage < 2 {
            return bad(format!("k_stage must be at least 2, got {}", self.k_stage));
        }
        if self.model.sub_periods != self.k_stage {
            return bad(format!(
                "model sub_periods {} must equal k_stage {}",
                self.model.sub_periods, self.k_stage
            ));
        }
        if self.model.use_fourier && self.features.sub_periods != self.k_stage {
            return bad(format!(
                "feature sub_periods {} must equal k_stage {}",
                self.features.sub_periods, self.k_stage
            ));
        }
        Ok(())
    }
}

/// Full pipeline recipe: stages ordered coarse to fine, the input blend,
/// and the aggregation rule linking each resolution to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub stages: Vec<StagePlan>,
    pub blend: BlendConfig,
    pub aggregation: Aggregation,
}

/// One trained stage: its expansion factor plus the self-contained
/// checkpoint (architecture, features, normalization, weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedStage {
    pub name: String,
    pub k_stage: usize,
    pub checkpoint: Checkpoint,
}

/// An ordered list of trained stages, applied coarse to fine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownscalePipeline {
    pub version: u32,
    pub aggregation: Aggregation,
    pub stages: Vec<TrainedStage>,
}

impl DownscalePipeline {
    /// Product of the stage expansion factors: output length per coarse
    /// input value.
    pub fn expansion(&self) -> usize {
        self.stages.iter().map(|s| s.k_stage).product()
    }

    pub fn validate(&self) -> Result<(), HierarchyError> {
        if self.stages.is_empty() {
            return Err(HierarchyError::EmptyPipeline);
        }
        for stage in &self.stages {
            if stage.k_stage < 2 || stage.k_stage != stage.checkpoint.model.sub_periods {
                return Err(HierarchyError::BadStage {
                    name: stage.name.clone(),
                    reason: format!(
                        "k_stage {} inconsistent with model sub_periods {}",
                        stage.k_stage, stage.checkpoint.model.sub_periods
                    ),
                });
            }
            stage.checkpoint.model.validate()?;
            stage.checkpoint.params.validate_shapes(&stage.checkpoint.model)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), HierarchyError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| {
            HierarchyError::PipelineParse { path: path.display().to_string(), source: e }
        })?;
        std::fs::write(path, json).map_err(|e| HierarchyError::PipelineIo {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<DownscalePipeline, HierarchyError> {
        let text = std::fs::read_to_string(path).map_err(|e| HierarchyError::PipelineIo {
            path: path.display().to_string(),
            source: e,
        })?;
        let pipeline: DownscalePipeline =
            serde_json::from_str(&text).map_err(|e| HierarchyError::PipelineParse {
                path: path.display().to_string(),
                source: e,
            })?;
        if pipeline.version != CHECKPOINT_VERSION {
            return Err(HierarchyError::PipelineVersion {
                found: pipeline.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        pipeline.validate()?;
        Ok(pipeline)
    }
}

/// A series at one resolution level with the start timestamp of each
/// unit, used to derive the per-stage training datasets.
#[derive(Debug, Clone)]
struct LevelSeries {
    values: Vec<f64>,
    starts: Vec<NaiveDateTime>,
}

impl LevelSeries {
    fn from_raw(raw: &RawSeries) -> Self {
        LevelSeries {
            values: raw.records.iter().map(|r| r.load).collect(),
            starts: raw.records.iter().map(|r| r.timestamp).collect(),
        }
    }

    /// Aggregates blocks of `k` fine units into one coarse unit each; a
    /// trailing partial block is dropped.
    fn aggregate(&self, k: usize, agg: Aggregation) -> LevelSeries {
        let n = self.values.len() / k;
        LevelSeries {
            values: (0..n).map(|t| agg.apply(&self.values[t * k..(t + 1) * k])).collect(),
            starts: (0..n).map(|t| self.starts[t * k]).collect(),
        }
    }

    /// Groups the series into `(x0, y)` pairs of `k` consecutive values.
    fn pairs(&self, k: usize, agg: Aggregation) -> Vec<RawPair> {
        let n = self.values.len() / k;
        (0..n)
            .map(|t| {
                let y_raw = self.values[t * k..(t + 1) * k].to_vec();
                RawPair {
                    index: t as i64,
                    x0_raw: agg.apply(&y_raw),
                    y_raw,
                    start: self.starts[t * k],
                }
            })
            .collect()
    }
}

/// Trains the stages coarse to fine on datasets re-aggregated from one
/// hourly source. The first (coarsest) stage trains on real inputs; each
/// later stage trains on `blend(real, upstream predictions, alpha)` and
/// is truncated to the span the upstream stage actually predicts.
/// Returns the pipeline and each stage's loss history.
pub fn train_pipeline(
    source: &RawSeries,
    plan: &PipelinePlan,
) -> Result<(DownscalePipeline, Vec<Vec<LossRecord>>), HierarchyError> {
    if plan.stages.is_empty() {
        return Err(HierarchyError::EmptyPipeline);
    }
    plan.blend.validate()?;
    for stage in &plan.stages {
        stage.validate()?;
    }
    let m = plan.stages.len();
    // levels[j] is the series consumed by stage j as its fine targets;
    // levels[m] is the hourly source, levels[0] the coarsest resolution.
    let mut levels: Vec<Option<LevelSeries>> = vec![None; m + 1];
    levels[m] = Some(LevelSeries::from_raw(source));
    for j in (0..m).rev() {
        let fine = levels[j + 1].as_ref().expect("level filled");
        levels[j] = Some(fine.aggregate(plan.stages[j].k_stage, plan.aggregation));
    }

    let mut stages = Vec::with_capacity(m);
    let mut histories = Vec::with_capacity(m);
    let mut upstream: Option<Vec<f64>> = None;
    for (j, stage) in plan.stages.iter().enumerate() {
        let fine = levels[j + 1].as_ref().expect("level filled");
        let needed = 2 * stage.k_stage;
        if fine.values.len() < needed {
            return Err(HierarchyError::StageDataTooShort {
                name: stage.name.clone(),
                needed,
                got: fine.values.len(),
            });
        }
        let mut pairs = fine.pairs(stage.k_stage, plan.aggregation);
        if let Some(pred) = &upstream {
            let n = pairs.len().min(pred.len());
            if n < 2 {
                return Err(HierarchyError::StageDataTooShort {
                    name: stage.name.clone(),
                    needed: 2 * stage.k_stage,
                    got: n * stage.k_stage,
                });
            }
            pairs.truncate(n);
            let real: Vec<f64> = pairs.iter().map(|p| p.x0_raw).collect();
            let blended = blend(&real, &pred[..n], plan.blend.alpha)?;
            for (pair, b) in pairs.iter_mut().zip(blended) {
                pair.x0_raw = b;
            }
        }
        let ds = dataset_from_pairs(&pairs, stage.k_stage, SplitTag::Train)?;
        let (params, history) = fit(&ds, &stage.model, &stage.features, &stage.train)?;

        // Physical-unit predictions of this stage's fine series feed the
        // next stage's blended inputs.
        let (x0, feats, _) = prepare_sequence(&ds, &stage.features, stage.model.use_fourier);
        let trace = forward_sequence(&params, &stage.model, &x0, &feats);
        let mut pred = Vec::with_capacity(ds.len() * stage.k_stage);
        for t in 0..ds.len() {
            for h in 0..stage.k_stage {
                pred.push(ds.stats.denormalize_y(trace.y_hat[t][(h, 0)]));
            }
        }
        upstream = Some(pred);

        stages.push(TrainedStage {
            name: stage.name.clone(),
            k_stage: stage.k_stage,
            checkpoint: Checkpoint {
                version: CHECKPOINT_VERSION,
                model: stage.model.clone(),
                features: stage.features.clone(),
                stats: ds.stats,
                aggregation: plan.aggregation,
                seed: stage.train.seed,
                params,
            },
        });
        histories.push(history);
    }
    Ok((
        DownscalePipeline { version: CHECKPOINT_VERSION, aggregation: plan.aggregation, stages },
        histories,
    ))
}

/// Rescales one fine block so its aggregate matches the coarse driver;
/// a degenerate (zero or non-finite) aggregate falls back to a uniform
/// split of the driver.
fn reconcile_block(block: &mut [f64], driver: f64, agg: Aggregation) {
    let current = agg.apply(block);
    if current != 0.0 && current.is_finite() {
        let factor = driver / current;
        for v in block.iter_mut() {
            *v *= factor;
        }
    } else {
        let uniform = match agg {
            Aggregation::Sum => driver / block.len() as f64,
            Aggregation::Mean => driver,
        };
        for v in block.iter_mut() {
            *v = uniform;
        }
    }
}

/// Applies the stages in order and returns each stage's output, finest
/// last. Stage outputs have length `input_len * k_stage`; with
/// `reconcile` every block of `k_stage` values is rescaled so its
/// aggregate equals the coarse value that drove it.
pub fn downscale_stages(
    pipeline: &DownscalePipeline,
    coarse: &[f64],
    reconcile: bool,
) -> Result<Vec<Vec<f64>>, HierarchyError> {
    pipeline.validate()?;
    if coarse.is_empty() {
        return Err(HierarchyError::EmptyInput);
    }
    let mut current = coarse.to_vec();
    let mut outputs = Vec::with_capacity(pipeline.stages.len());
    for stage in &pipeline.stages {
        let ck = &stage.checkpoint;
        let k = stage.k_stage;
        let x0: Vec<f64> = current.iter().map(|&v| ck.stats.normalize_x0(v)).collect();
        let feats: Vec<Mat> = if ck.model.use_fourier {
            (0..current.len()).map(|t| ck.features.matrix(t as i64)).collect()
        } else {
            Vec::new()
        };
        let trace = forward_sequence(&ck.params, &ck.model, &x0, &feats);
        let mut fine = Vec::with_capacity(current.len() * k);
        for (t, &driver) in current.iter().enumerate() {
            let mut block: Vec<f64> =
                (0..k).map(|h| ck.stats.denormalize_y(trace.y_hat[t][(h, 0)])).collect();
            if reconcile {
                reconcile_block(&mut block, driver, pipeline.aggregation);
            }
            fine.extend_from_slice(&block);
        }
        outputs.push(fine.clone());
        current = fine;
    }
    Ok(outputs)
}

/// Final output of [`downscale_stages`]: the finest series, with length
/// `coarse.len()` times the product of the stage expansion factors.
pub fn downscale(
    pipeline: &DownscalePipeline,
    coarse: &[f64],
    reconcile: bool,
) -> Result<Vec<f64>, HierarchyError> {
    Ok(downscale_stages(pipeline, coarse, reconcile)?.pop().expect("at least one stage"))
}

/// Coarse year-to-day downscaler used underneath the neural refiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseDownscaler {
    /// Spreads the yearly value evenly over the days.
    UniformSplit,
    /// A fitted daily-shape curve, rescaled so the days re-aggregate to
    /// the yearly driver.
    Harmonic(HarmonicFit),
}

impl BaseDownscaler {
    /// Daily profile of one year from its yearly aggregate. The time
    /// axis passed to a harmonic curve is the day index `0..n_days`.
    pub fn yearly_to_daily(&self, yearly: f64, n_days: usize, agg: Aggregation) -> Vec<f64> {
        assert!(n_days >= 1, "need at least one day");
        match self {
            BaseDownscaler::UniformSplit => {
                let per_day = match agg {
                    Aggregation::Sum => yearly / n_days as f64,
                    Aggregation::Mean => yearly,
                };
                vec![per_day; n_days]
            }
            BaseDownscaler::Harmonic(fit) => {
                let mut days: Vec<f64> = (0..n_days).map(|d| fit.predict(d as f64)).collect();
                reconcile_block(&mut days, yearly, agg);
                days
            }
        }
    }
}

/// Days per year after leap-day truncation.
pub const DAYS_PER_YEAR: usize = 365;
/// Hours per day.
pub const HOURS_PER_DAY: usize = 24;

/// Composes a coarse base downscaler with a trained day-to-hour refiner:
/// the base turns one yearly value into 365 daily values, the refiner
/// expands each day to 24 hours. Returns a `365 x 24` matrix, one row
/// per day.
pub fn rnn_enhanced_downscale(
    base: &BaseDownscaler,
    refiner: &TrainedStage,
    yearly: f64,
) -> Result<Mat, HierarchyError> {
    if refiner.k_stage != HOURS_PER_DAY {
        return Err(HierarchyError::BadStage {
            name: refiner.name.clone(),
            reason: format!("refiner must expand days to {HOURS_PER_DAY} hours, k_stage is {}", refiner.k_stage),
        });
    }
    let agg = refiner.checkpoint.aggregation;
    let days = base.yearly_to_daily(yearly, DAYS_PER_YEAR, agg);
    if days.len() != DAYS_PER_YEAR {
        return Err(HierarchyError::BaseOutputLength {
            got: days.len(),
            expected: DAYS_PER_YEAR,
        });
    }
    let pipeline = DownscalePipeline {
        version: CHECKPOINT_VERSION,
        aggregation: agg,
        stages: vec![refiner.clone()],
    };
    let hours = downscale(&pipeline, &days, false)?;
    Ok(Mat::from_vec(DAYS_PER_YEAR, HOURS_PER_DAY, hours))
}
