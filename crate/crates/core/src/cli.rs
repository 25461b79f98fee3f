//! Command-line entrypoint: wires ingestion, training, evaluation,
//! calibration, ablation, and hierarchical downscaling into one binary
//! with structured config files and deterministic seeding.
//!
//! Exit codes: `0` success, `1` runtime or config error (diagnostic on
//! stderr), `2` usage error (unknown subcommand or flag).

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use std::error::Error as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::{derive_seed, ConfigError, EvalConfig, RunConfig};
use crate::eval::{
    config_fingerprint, evaluate_model, run_ablation_suite, EvalError, EvalReport, SynthHarmonic,
    SynthSpec, Variant,
};
use crate::hierarchy::{downscale_stages, train_pipeline, DownscalePipeline, HierarchyError};
use crate::ingest::{
    clean, dataset_with_stats, load_csv, make_pairs, CsvFormat, IngestError, RawSeries, SplitTag,
};
use crate::model::{Checkpoint, ModelConfig, ModelError, CHECKPOINT_VERSION};
use crate::train::{fit, LossRecord, TrainError};
use crate::uncertainty::UncertaintyError;

/// Anything a subcommand can fail with at runtime (exit code 1).
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output to {path} failed: {source}")]
    CsvWrite {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Parser)]
#[command(
    name = "loadscale",
    version,
    about = "Temporal downscaling of load series with a Fourier-enhanced recurrent model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic hourly load CSV: a daily
    /// cycle, weekly-family harmonics, a linear trend, and Gaussian
    /// noise.
    Synth {
        /// Number of synthetic days (24 rows each).
        #[arg(long, default_value_t = 30)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Base load level.
        #[arg(long, default_value_t = 100.0)]
        level: f64,
        /// Linear trend per hour.
        #[arg(long, default_value_t = 0.002)]
        slope: f64,
        /// Standard deviation of the additive Gaussian noise.
        #[arg(long, default_value_t = 1.0)]
        noise_sd: f64,
    },
    /// Parse an hourly CSV, deduplicate timestamps, and gap-fill to
    /// exact hourly cadence; writes the cleaned series in canonical
    /// `timestamp,load` form.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        region: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "timestamp")]
        time_col: String,
        #[arg(long, default_value = "load")]
        load_col: String,
        #[arg(long, default_value = "%Y-%m-%d %H:%M:%S")]
        time_fmt: String,
    },
    /// Train on an hourly CSV and write a checkpoint (or, when the
    /// config has a `hierarchy` section, a multi-stage pipeline).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoint, loss curves, and resolved config.
        #[arg(long)]
        out_dir: PathBuf,
        /// Optional JSON config; flags below override its keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sub-periods per coarse period.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        region: Option<String>,
    },
    /// Evaluate a checkpoint: rolling forecasts over the test split,
    /// RMSE per horizon, and interval calibration.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of evaluation windows.
        #[arg(long, default_value_t = 70)]
        windows: usize,
        /// Stride between window starts, in hours.
        #[arg(long, default_value_t = 24)]
        stride: usize,
        /// Interval miscoverage level.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Fraction used for training when the data was split.
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
        #[arg(long, default_value = "default")]
        region: String,
        /// Directory for report.json and rmse.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every model variant over several seeds and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Number of seeds, split deterministically from the root seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        region: String,
        /// Directory for outcomes.json and comparison.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Backtest prediction-interval coverage for a checkpoint.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 70)]
        windows: usize,
        /// Stride between window starts, in hours.
        #[arg(long, default_value_t = 24)]
        stride: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
        #[arg(long, default_value = "default")]
        region: String,
        /// Directory for calibration.json and calibration.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a coarse series to fine resolution with a trained
    /// pipeline.
    Downscale {
        /// Pipeline file written by `train` with a hierarchy config.
        #[arg(long)]
        pipeline: PathBuf,
        /// CSV whose first column holds the coarse values.
        #[arg(long)]
        input: PathBuf,
        /// Rescale each output block so its aggregate matches the
        /// coarse value that drove it.
        #[arg(long, value_enum, default_value_t = Toggle::Off)]
        reconcile: Toggle,
        /// Output CSV path (`index,value`).
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (without the program name) and runs the subcommand.
pub fn dispatch(argv: Vec<String>) -> i32 {
    let mut full = Vec::with_capacity(argv.len() + 1);
    full.push("loadscale".to_string());
    full.extend(argv);
    let cli = match Cli::try_parse_from(&full) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { days, seed, out, level, slope, noise_sd } => {
            let spec = SynthSpec {
                level,
                slope,
                harmonics: vec![
                    SynthHarmonic { amplitude: 12.0, period: 24.0, phase: 3.0 },
                    SynthHarmonic { amplitude: 3.0, period: 168.0, phase: 20.0 },
                    SynthHarmonic { amplitude: 4.0, period: 28.0, phase: 11.0 },
                    SynthHarmonic { amplitude: 4.0, period: 21.0, phase: 2.0 },
                ],
                noise_sd,
                n_days: days,
                seed,
            };
            let series = crate::eval::synth_generate(&spec);
            write_series_csv(&out, &series)?;
            println!("wrote {} hourly rows to {}", series.records.len(), out.display());
            Ok(())
        }
        Command::Ingest { data, region, out, time_col, load_col, time_fmt } => {
            let fmt = CsvFormat { time_col, load_col, time_fmt };
            let raw = load_csv(&data, &region, &fmt)?;
            let cleaned = clean(&raw)?;
            write_series_csv(&out, &cleaned)?;
            println!(
                "ingested {} rows, cleaned to {} hourly rows at {}",
                raw.records.len(),
                cleaned.records.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { data, out_dir, config, seed, k, epochs, train_fraction, region } => {
            let mut cfg = load_run_config(config.as_deref())?;
            cfg.data.path = Some(data.clone());
            cfg.out_dir = out_dir.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(k) = k {
                cfg.data.k = k;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(f) = train_fraction {
                cfg.data.train_fraction = f;
            }
            if let Some(r) = region {
                cfg.data.region = r;
            }
            cfg.finalize();
            cfg.validate()?;
            create_dir(&out_dir)?;
            cfg.save(&out_dir.join("config.json"))?;

            let cleaned = clean(&load_csv(&data, &cfg.data.region, &cfg.data.format)?)?;
            if let Some(plan) = &cfg.hierarchy {
                let (pipeline, histories) = train_pipeline(&cleaned, plan)?;
                pipeline.save(&out_dir.join("pipeline.json"))?;
                for (stage, history) in plan.stages.iter().zip(&histories) {
                    write_loss_csv(&out_dir.join(format!("loss_{}.csv", stage.name)), history)?;
                }
                println!(
                    "trained {}-stage pipeline (expansion x{}) into {}",
                    pipeline.stages.len(),
                    pipeline.expansion(),
                    out_dir.display()
                );
            } else {
                let pairs = make_pairs(&cleaned, cfg.data.k, cfg.data.aggregation)?;
                let (train_ds, _test_ds) =
                    crate::ingest::split_and_normalize(&pairs, cfg.data.train_fraction, cfg.data.k)?;
                let (params, history) = fit(&train_ds, &cfg.model, &cfg.features, &cfg.train)?;
                let checkpoint = Checkpoint {
                    version: CHECKPOINT_VERSION,
                    model: cfg.model.clone(),
                    features: cfg.features.clone(),
                    stats: train_ds.stats,
                    aggregation: cfg.data.aggregation,
                    seed: cfg.train.seed,
                    params,
                };
                checkpoint.save(&out_dir.join("checkpoint.json"))?;
                write_loss_csv(&out_dir.join("loss.csv"), &history)?;
                let final_loss = history.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
                println!(
                    "trained {} epochs on {} periods, final loss {:.6} -> {}",
                    cfg.train.epochs,
                    train_ds.len(),
                    final_loss,
                    out_dir.join("checkpoint.json").display()
                );
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            windows,
            stride,
            alpha,
            train_fraction,
            region,
            out,
        } => {
            let report =
                checkpoint_report(&checkpoint, &data, &region, windows, stride, alpha, train_fraction)?;
            create_dir(&out)?;
            write_json(&out.join("report.json"), &report)?;
            write_rmse_csv(&out.join("rmse.csv"), &report.rmse_by_horizon)?;
            println!(
                "evaluated {} windows: mean rmse {:.6}, mean rejection {:.4} -> {}",
                windows,
                report.mean_rmse,
                report.rejection.mean,
                out.join("report.json").display()
            );
            Ok(())
        }
        Command::Ablate { data, seeds, config, region, out } => {
            let mut cfg = load_run_config(config.as_deref())?;
            cfg.data.path = Some(data.clone());
            cfg.data.region = region;
            cfg.finalize();
            cfg.validate()?;
            let acfg = crate::eval::AblationConfig {
                k: cfg.data.k,
                train_fraction: cfg.data.train_fraction,
                aggregation: cfg.data.aggregation,
                features: cfg.features.clone(),
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                windows: cfg.eval.window_spec(cfg.data.k),
                alpha: cfg.eval.alpha,
                baseline: cfg.baseline.clone(),
            };
            let seed_list: Vec<u64> =
                (0..seeds).map(|i| derive_seed(cfg.seed, &format!("ablation/{i}"))).collect();
            let cleaned = clean(&load_csv(&data, &cfg.data.region, &cfg.data.format)?)?;
            let outcomes = run_ablation_suite(&cleaned, &acfg, &seed_list, &Variant::all())?;
            create_dir(&out)?;
            write_json(&out.join("outcomes.json"), &outcomes)?;
            write_comparison_csv(&out.join("comparison.csv"), &outcomes)?;
            for outcome in &outcomes {
                match &outcome.report {
                    Some(r) => println!(
                        "{:>18}  seed {:>20}  mean rmse {:.6}",
                        outcome.variant, outcome.seed, r.mean_rmse
                    ),
                    None => println!(
                        "{:>18}  seed {:>20}  failed: {}",
                        outcome.variant,
                        outcome.seed,
                        outcome.error.as_deref().unwrap_or("unknown")
                    ),
                }
            }
            Ok(())
        }
        Command::Calibrate {
            checkpoint,
            data,
            windows,
            stride,
            alpha,
            train_fraction,
            region,
            out,
        } => {
            let report =
                checkpoint_report(&checkpoint, &data, &region, windows, stride, alpha, train_fraction)?;
            create_dir(&out)?;
            write_json(&out.join("calibration.json"), &report.rejection)?;
            write_calibration_csv(&out.join("calibration.csv"), &report.rejection.per_horizon)?;
            println!(
                "rejection over {} windows at alpha {}: mean {:.4}, min {:.4}, max {:.4}",
                windows, alpha, report.rejection.mean, report.rejection.min, report.rejection.max
            );
            Ok(())
        }
        Command::Downscale { pipeline, input, reconcile, out } => {
            let pipeline = DownscalePipeline::load(&pipeline)?;
            let coarse = read_value_column(&input)?;
            let outputs = downscale_stages(&pipeline, &coarse, reconcile == Toggle::On)?;
            let fine = outputs.last().expect("at least one stage");
            write_value_csv(&out, fine)?;
            println!(
                "downscaled {} coarse values to {} fine values -> {}",
                coarse.len(),
                fine.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Shared evaluate/calibrate path: reproduce the chronological split,
/// normalize with the checkpoint's statistics, and run the evaluation.
fn checkpoint_report(
    checkpoint: &Path,
    data: &Path,
    region: &str,
    windows: usize,
    stride_hours: usize,
    alpha: f64,
    train_fraction: f64,
) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let cleaned = clean(&load_csv(data, region, &CsvFormat::default())?)?;
    let k = ck.model.sub_periods;
    let pairs = make_pairs(&cleaned, k, ck.aggregation)?;
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CliError::Invalid(format!(
            "--train-fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * pairs.len() as f64).floor() as usize;
    if n_train == 0 || n_train == pairs.len() {
        return Err(CliError::Invalid(format!(
            "--train-fraction {train_fraction} leaves an empty split for {} periods",
            pairs.len()
        )));
    }
    let train_ds = dataset_with_stats(&pairs[..n_train], k, ck.stats, SplitTag::Train);
    let test_ds = dataset_with_stats(&pairs[n_train..], k, ck.stats, SplitTag::Test);
    let wspec = EvalConfig { n_windows: windows, stride_hours, alpha }.window_spec(k);
    let hash = config_fingerprint(&(&ck.model, &ck.features, &wspec, alpha, train_fraction));
    Ok(evaluate_model(
        &ck.params,
        &ck.model,
        &ck.features,
        &train_ds,
        &test_ds,
        &wspec,
        alpha,
        variant_label(&ck.model),
        ck.seed,
        hash,
    )?)
}

fn variant_label(cfg: &ModelConfig) -> &'static str {
    match (cfg.use_fourier, cfg.use_attention) {
        (true, _) => "fourier_rnn",
        (false, true) => "rnn_attn",
        (false, false) => "simple_rnn",
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, json)
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

fn write_series_csv(path: &Path, series: &RawSeries) -> Result<(), CliError> {
    let wrap = |e: csv::Error| CliError::CsvWrite { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["timestamp", "load"]).map_err(wrap)?;
    for r in &series.records {
        w.write_record([
            r.timestamp.format("%Y-%m-%d %H:%M:%S").to_string(),
            r.load.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<(), CliError> {
    let wrap = |e: csv::Error| CliError::CsvWrite { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["epoch", "loss_data", "loss_harm", "loss_total"]).map_err(wrap)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.loss_data.to_string(),
            r.loss_harm.to_string(),
            r.loss_total.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

fn write_rmse_csv(path: &Path, rmse: &[f64]) -> Result<(), CliError> {
    let wrap = |e: csv::Error| CliError::CsvWrite { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["h", "rmse"]).map_err(wrap)?;
    for (h, v) in rmse.iter().enumerate() {
        w.write_record([h.to_string(), v.to_string()]).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

fn write_calibration_csv(path: &Path, rates: &[f64]) -> Result<(), CliError> {
    let wrap = |e: csv::Error| CliError::CsvWrite { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["h", "r_h"]).map_err(wrap)?;
    for (h, v) in rates.iter().enumerate() {
        w.write_record([h.to_string(), v.to_string()]).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

fn write_comparison_csv(path: &Path, outcomes: &[crate::eval::AblationOutcome]) -> Result<(), CliError> {
    let wrap = |e: csv::Error| CliError::CsvWrite { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["variant", "seed", "mean_rmse", "mean_rejection", "error"]).map_err(wrap)?;
    for o in outcomes {
        let (rmse, rej) = match &o.report {
            Some(r) => (r.mean_rmse.to_string(), r.rejection.mean.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            o.variant.clone(),
            o.seed.to_string(),
            rmse,
            rej,
            o.error.clone().unwrap_or_default(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

fn write_value_csv(path: &Path, values: &[f64]) -> Result<(), CliError> {
    let wrap = |e: csv::Error| CliError::CsvWrite { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["index", "value"]).map_err(wrap)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.display().to_string(), source: e })
}

/// Reads the first column of a CSV as numbers; a non-numeric first line
/// is treated as a header and skipped.
fn read_value_column(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.split(',').next().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(CliError::Invalid(format!(
                    "{} line {}: expected a number in the first column, got `{cell}`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if values.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} holds no numeric values in its first column",
            path.display()
        )));
    }
    Ok(values)
}
