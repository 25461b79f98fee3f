//! Loading, cleaning, and pairing of hourly load data.
//!
//! The pipeline is: `load_csv` -> `clean` -> `make_pairs` ->
//! `split_and_normalize`. Cleaning collapses duplicate timestamps
//! (keeping the first occurrence) and forward-fills missing hours so
//! the output has exact hourly cadence. Pairing groups `K` consecutive
//! hours into one coarse period whose scalar input is the block sum or
//! mean. Normalization stats come from the training partition only.

use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("no parseable rows")]
    NoParseableRows,
    #[error("row {row}: bad timestamp {value:?} for format {format:?}")]
    BadTimestamp { row: usize, value: String, format: String },
    #[error("row {row}: timestamp {value} is not aligned to a whole hour")]
    MisalignedTimestamp { row: usize, value: NaiveDateTime },
    #[error("leading gap: first record has no value to forward-fill from")]
    LeadingGap,
    #[error("series is empty")]
    EmptySeries,
    #[error("fewer than one full period of {k} values (got {len})")]
    TooShort { len: usize, k: usize },
    #[error("need at least 2 periods to split, got {0}")]
    TooFewPeriods(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadTrainFraction(f64),
    #[error("train partition is empty after the chronological split")]
    EmptyTrainSplit,
    #[error("degenerate training data: {0} has zero variance")]
    DegenerateTraining(&'static str),
}

/// One hourly observation. `load` may be NaN before cleaning (the
/// missing-value marker produced by `load_csv` for non-numeric cells);
/// after [`clean`] every load is finite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourlyRecord {
    pub timestamp: NaiveDateTime,
    pub load: f64,
}

/// An hourly load series for one region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub records: Vec<HourlyRecord>,
    pub region_id: String,
}

impl RawSeries {
    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.load).collect()
    }
}

/// CSV column layout. `time_fmt` is a chrono format string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvFormat {
    pub time_col: String,
    pub load_col: String,
    pub time_fmt: String,
}

impl Default for CsvFormat {
    fn default() -> Self {
        CsvFormat {
            time_col: "timestamp".into(),
            load_col: "load".into(),
            time_fmt: "%Y-%m-%d %H:%M:%S".into(),
        }
    }
}

/// How `K` fine values aggregate into one coarse value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    #[default]
    Mean,
}

impl Aggregation {
    pub fn apply(&self, values: &[f64]) -> f64 {
        let sum: f64 = values.iter().sum();
        match self {
            Aggregation::Sum => sum,
            Aggregation::Mean => sum / values.len() as f64,
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(format!("unknown aggregation {other:?} (expected sum|mean)")),
        }
    }
}

/// Z-score statistics computed on the training partition.
///
/// Uses population standard deviation (divide by n).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean_x0: f64,
    pub std_x0: f64,
    pub mean_y: f64,
    pub std_y: f64,
}

impl NormalizationStats {
    pub fn normalize_x0(&self, v: f64) -> f64 {
        (v - self.mean_x0) / self.std_x0
    }

    pub fn denormalize_x0(&self, v: f64) -> f64 {
        v * self.std_x0 + self.mean_x0
    }

    pub fn normalize_y(&self, v: f64) -> f64 {
        (v - self.mean_y) / self.std_y
    }

    pub fn denormalize_y(&self, v: f64) -> f64 {
        v * self.std_y + self.mean_y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// One coarse period: scalar input `x0` and the `K` normalized
/// high-resolution targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Period {
    /// Period index `t`, counted from 0 over the full pair list; test
    /// periods continue the training numbering so seasonal phase stays
    /// aligned across the split.
    pub index: i64,
    /// Normalized coarse aggregate.
    pub x0: f64,
    /// Normalized high-resolution targets, length `K`.
    pub y: Vec<f64>,
    pub start: NaiveDateTime,
}

/// Aligned multi-resolution pairs with their normalization stats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiResolutionDataset {
    pub periods: Vec<Period>,
    pub sub_periods: usize,
    pub stats: NormalizationStats,
    pub split_tag: SplitTag,
}

impl MultiResolutionDataset {
    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    /// Normalized coarse inputs in period order.
    pub fn x0_seq(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.x0).collect()
    }
}

/// Raw pair before normalization: `(t, x0_raw, y_raw, period_start)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPair {
    pub index: i64,
    pub x0_raw: f64,
    pub y_raw: Vec<f64>,
    pub start: NaiveDateTime,
}

/// Parses an hourly CSV. Non-numeric load cells become NaN markers for
/// [`clean`]; rows must carry hour-aligned timestamps.
pub fn load_csv(path: &Path, region: &str, fmt: &CsvFormat) -> Result<RawSeries, IngestError> {
    let display = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => IngestError::Io {
                path: display.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => IngestError::Csv { path: display.clone(), source: e },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Csv { path: display.clone(), source: e })?
        .clone();
    let col_idx = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let time_idx = col_idx(&fmt.time_col)?;
    let load_idx = col_idx(&fmt.load_col)?;

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| IngestError::Csv { path: display.clone(), source: e })?;
        let ts_raw = row.get(time_idx).unwrap_or("");
        let timestamp = NaiveDateTime::parse_from_str(ts_raw, &fmt.time_fmt).map_err(|_| {
            IngestError::BadTimestamp {
                row: i + 2, // 1-based, after the header
                value: ts_raw.to_string(),
                format: fmt.time_fmt.clone(),
            }
        })?;
        if timestamp.minute() != 0 || timestamp.second() != 0 {
            return Err(IngestError::MisalignedTimestamp { row: i + 2, value: timestamp });
        }
        let load = row
            .get(load_idx)
            .and_then(|cell| cell.trim().parse::<f64>().ok())
            .unwrap_or(f64::NAN);
        records.push(HourlyRecord { timestamp, load });
    }
    if records.is_empty() {
        return Err(IngestError::NoParseableRows);
    }
    Ok(RawSeries { records, region_id: region.to_string() })
}

/// Deduplicates and gap-fills a series into exact hourly cadence.
///
/// Duplicate timestamps keep the first occurrence (stable in file
/// order). Missing hours and NaN loads are forward-filled with the most
/// recent prior value. A missing or NaN first value is an error since
/// there is nothing to fill from.
pub fn clean(raw: &RawSeries) -> Result<RawSeries, IngestError> {
    if raw.records.is_empty() {
        return Err(IngestError::EmptySeries);
    }
    let mut sorted = raw.records.clone();
    sorted.sort_by_key(|r| r.timestamp);
    sorted.dedup_by_key(|r| r.timestamp);

    if sorted[0].load.is_nan() {
        return Err(IngestError::LeadingGap);
    }

    let first = sorted[0].timestamp;
    let last = sorted[sorted.len() - 1].timestamp;
    let n_hours = (last - first).num_hours() as usize + 1;
    let mut records = Vec::with_capacity(n_hours);
    let mut cursor = 0usize;
    let mut prev = sorted[0].load;
    for h in 0..n_hours {
        let ts = first + Duration::hours(h as i64);
        let mut value = f64::NAN;
        if cursor < sorted.len() && sorted[cursor].timestamp == ts {
            value = sorted[cursor].load;
            cursor += 1;
        }
        if value.is_nan() {
            value = prev;
        }
        prev = value;
        records.push(HourlyRecord { timestamp: ts, load: value });
    }
    Ok(RawSeries { records, region_id: raw.region_id.clone() })
}

/// Groups a cleaned series into `(t, x0_raw, y_raw)` pairs of `K`
/// consecutive values; a trailing partial period is dropped.
pub fn make_pairs(
    raw: &RawSeries,
    k: usize,
    aggregation: Aggregation,
) -> Result<Vec<RawPair>, IngestError> {
    assert!(k >= 1, "K must be >= 1");
    let n = raw.records.len();
    if n < k {
        return Err(IngestError::TooShort { len: n, k });
    }
    let n_periods = n / k;
    let mut pairs = Vec::with_capacity(n_periods);
    for t in 0..n_periods {
        let block = &raw.records[t * k..(t + 1) * k];
        let y_raw: Vec<f64> = block.iter().map(|r| r.load).collect();
        pairs.push(RawPair {
            index: t as i64,
            x0_raw: aggregation.apply(&y_raw),
            y_raw,
            start: block[0].timestamp,
        });
    }
    Ok(pairs)
}

fn population_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Chronological split at `floor(train_fraction * n)` followed by
/// z-score normalization with training statistics applied to both
/// partitions.
pub fn split_and_normalize(
    pairs: &[RawPair],
    train_fraction: f64,
    k: usize,
) -> Result<(MultiResolutionDataset, MultiResolutionDataset), IngestError> {
    if pairs.len() < 2 {
        return Err(IngestError::TooFewPeriods(pairs.len()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(IngestError::BadTrainFraction(train_fraction));
    }
    let n_train = (train_fraction * pairs.len() as f64).floor() as usize;
    if n_train == 0 {
        return Err(IngestError::EmptyTrainSplit);
    }
    let (train_pairs, test_pairs) = pairs.split_at(n_train);

    let (mean_x0, std_x0) = population_stats(train_pairs.iter().map(|p| p.x0_raw));
    let (mean_y, std_y) =
        population_stats(train_pairs.iter().flat_map(|p| p.y_raw.iter().copied()));
    if std_x0 == 0.0 {
        return Err(IngestError::DegenerateTraining("x0"));
    }
    if std_y == 0.0 {
        return Err(IngestError::DegenerateTraining("y"));
    }
    let stats = NormalizationStats { mean_x0, std_x0, mean_y, std_y };

    let build = |src: &[RawPair], tag: SplitTag| MultiResolutionDataset {
        periods: src
            .iter()
            .map(|p| Period {
                index: p.index,
                x0: stats.normalize_x0(p.x0_raw),
                y: p.y_raw.iter().map(|&v| stats.normalize_y(v)).collect(),
                start: p.start,
            })
            .collect(),
        sub_periods: k,
        stats,
        split_tag: tag,
    };
    Ok((build(train_pairs, SplitTag::Train), build(test_pairs, SplitTag::Test)))
}

/// Normalizes a pair list with externally supplied statistics (for
/// example the ones stored in a checkpoint, so fresh data is scaled
/// exactly the way the model was trained).
pub fn dataset_with_stats(
    pairs: &[RawPair],
    k: usize,
    stats: NormalizationStats,
    tag: SplitTag,
) -> MultiResolutionDataset {
    MultiResolutionDataset {
        periods: pairs
            .iter()
            .map(|p| Period {
                index: p.index,
                x0: stats.normalize_x0(p.x0_raw),
                y: p.y_raw.iter().map(|&v| stats.normalize_y(v)).collect(),
                start: p.start,
            })
            .collect(),
        sub_periods: k,
        stats,
        split_tag: tag,
    }
}

/// Normalizes a pair list as one dataset, with statistics computed over
/// the whole list. Used where no chronological split is wanted, such as
/// the per-stage datasets of a hierarchical pipeline.
pub fn dataset_from_pairs(
    pairs: &[RawPair],
    k: usize,
    tag: SplitTag,
) -> Result<MultiResolutionDataset, IngestError> {
    if pairs.len() < 2 {
        return Err(IngestError::TooFewPeriods(pairs.len()));
    }
    let (mean_x0, std_x0) = population_stats(pairs.iter().map(|p| p.x0_raw));
    let (mean_y, std_y) = population_stats(pairs.iter().flat_map(|p| p.y_raw.iter().copied()));
    if std_x0 == 0.0 {
        return Err(IngestError::DegenerateTraining("x0"));
    }
    if std_y == 0.0 {
        return Err(IngestError::DegenerateTraining("y"));
    }
    let stats = NormalizationStats { mean_x0, std_x0, mean_y, std_y };
    Ok(MultiResolutionDataset {
        periods: pairs
            .iter()
            .map(|p| Period {
                index: p.index,
                x0: stats.normalize_x0(p.x0_raw),
                y: p.y_raw.iter().map(|&v| stats.normalize_y(v)).collect(),
                start: p.start,
            })
            .collect(),
        sub_periods: k,
        stats,
        split_tag: tag,
    })
}
