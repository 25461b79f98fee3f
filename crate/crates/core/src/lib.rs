//! Temporal downscaling of electrical load series.
//!
//! The library maps coarse-resolution load values (daily or yearly
//! aggregates) to high-resolution profiles (hourly vectors) with a
//! recurrent network that fuses Fourier seasonal embeddings in latent
//! space and refines each step with self-attention over the latent
//! coordinates. Training runs on an internal reverse-mode gradient
//! engine ([`tape`]) with Adam and gradient clipping, uncertainty is
//! quantified with residual-Gaussian prediction intervals
//! ([`uncertainty`]), and yearly-to-hourly downscaling composes stage
//! models hierarchically ([`hierarchy`]).
//!
//! Pipeline stages map onto modules:
//!
//! * [`ingest`] — CSV loading, cleaning, multi-resolution pairing,
//!   chronological split, z-score normalization.
//! * [`features`] — Fourier seasonal feature matrices per period.
//! * [`model`] — the deterministic forward network and checkpoints.
//! * [`tape`] — reverse-mode automatic differentiation.
//! * [`train`] — losses, analytic gradients, Adam, the training loop,
//!   and a finite-difference gradient oracle.
//! * [`uncertainty`] — residual covariance, prediction intervals,
//!   rejection-rate calibration.
//! * [`baseline`] — harmonic least-squares regression baseline.
//! * [`hierarchy`] — multi-stage downscaling pipelines and the
//!   refiner-on-base composition.
//! * [`eval`] — rolling-window forecasts, horizon-wise RMSE, synthetic
//!   data, and the ablation suite.
//! * [`config`] / [`cli`] — run configuration and the command-line
//!   entrypoint.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod eval;
pub mod features;
pub mod hierarchy;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod tape;
pub mod train;
pub mod uncertainty;

pub use linalg::Mat;
