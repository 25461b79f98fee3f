//! Fourier seasonal feature matrices.
//!
//! Each coarse period `t` gets a `K x 2F` matrix whose row `s` encodes
//! the phase of the sub-period at fractional time `t + s/K`: columns
//! interleave `[sin w_1, cos w_1, ..., sin w_F, cos w_F]` with angular
//! frequencies `w_k = 2*pi*k / P` for a base cycle of length `P` period
//! units. Several base cycles are supported by concatenating blocks
//! column-wise.

use crate::linalg::Mat;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// One base cycle: cycle length `period` (in period units) and the
/// number of harmonics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    /// Base cycle length P, in units of the period index (must be > 0).
    pub period: f64,
    /// Number of harmonics F (>= 1).
    pub harmonics: usize,
    /// Sub-periods per period K (>= 1).
    pub sub_periods: usize,
}

impl FourierConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.period <= 0.0 || self.period.is_nan() {
            return Err(format!("fourier period must be > 0, got {}", self.period));
        }
        if self.harmonics == 0 {
            return Err("fourier harmonics must be >= 1".into());
        }
        if self.sub_periods == 0 {
            return Err("sub_periods must be >= 1".into());
        }
        Ok(())
    }

    pub fn feat_width(&self) -> usize {
        2 * self.harmonics
    }
}

/// `K x 2F` feature matrix for one period; every entry is in `[-1, 1]`
/// and each `(sin, cos)` column pair of a row has unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierFeatures {
    pub matrix: Mat,
}

/// Evaluates the feature matrix at period index `t` (fractional values
/// allowed; phase offsets are applied by adding to `t`).
pub fn build_features(t: f64, cfg: &FourierConfig) -> FourierFeatures {
    let k_sub = cfg.sub_periods;
    let width = cfg.feat_width();
    let mut matrix = Mat::zeros(k_sub, width);
    for s in 0..k_sub {
        let pos = t + s as f64 / k_sub as f64;
        for k in 1..=cfg.harmonics {
            let omega = TAU * k as f64 / cfg.period;
            let angle = omega * pos;
            matrix[(s, 2 * k - 2)] = angle.sin();
            matrix[(s, 2 * k - 1)] = angle.cos();
        }
    }
    FourierFeatures { matrix }
}

/// A block of one or more base cycles sharing the same sub-period
/// count, plus a global phase offset added to the period index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub blocks: Vec<HarmonicBlock>,
    pub sub_periods: usize,
    #[serde(default)]
    pub phase0: f64,
}

/// One `(P, F)` entry of a [`FeatureSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicBlock {
    pub period: f64,
    pub harmonics: usize,
}

impl FeatureSpec {
    pub fn new(blocks: Vec<HarmonicBlock>, sub_periods: usize, phase0: f64) -> Self {
        FeatureSpec { blocks, sub_periods, phase0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.blocks.is_empty() {
            return Err("feature spec needs at least one harmonic block".into());
        }
        for b in &self.blocks {
            FourierConfig { period: b.period, harmonics: b.harmonics, sub_periods: self.sub_periods }
                .validate()?;
        }
        Ok(())
    }

    /// Total feature width `2 * sum(F_b)`.
    pub fn feat_width(&self) -> usize {
        self.blocks.iter().map(|b| 2 * b.harmonics).sum()
    }

    /// Concatenated `K x feat_width` matrix for integer period index
    /// `t`, with `phase0` applied.
    pub fn matrix(&self, t: i64) -> Mat {
        let t_eff = t as f64 + self.phase0;
        let k_sub = self.sub_periods;
        let mut out = Mat::zeros(k_sub, self.feat_width());
        let mut col0 = 0;
        for block in &self.blocks {
            let cfg = FourierConfig {
                period: block.period,
                harmonics: block.harmonics,
                sub_periods: k_sub,
            };
            let feats = build_features(t_eff, &cfg);
            for s in 0..k_sub {
                for j in 0..cfg.feat_width() {
                    out[(s, col0 + j)] = feats.matrix[(s, j)];
                }
            }
            col0 += cfg.feat_width();
        }
        out
    }

    /// Harmonic order of each feature row of the projection matrix:
    /// the `(sin, cos)` pair of harmonic `k` gets weight `k`, blocks
    /// concatenated in order.
    pub fn penalty_row_weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.feat_width());
        for block in &self.blocks {
            for k in 1..=block.harmonics {
                w.push(k as f64);
                w.push(k as f64);
            }
        }
        w
    }
}
