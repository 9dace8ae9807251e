//! Calibration measurement (ECE, reliability bins) and post-hoc maps over
//! logits fitted on validation data.

mod ece;
mod fit;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ece::{
    accuracy, argmax, bin_index, compute_ece, compute_multilabel_ece, multilabel_accuracy, reliability, Bin,
    MultilabelEce, ReliabilityBins, DEFAULT_BINS,
};
pub use fit::{fit_platt, fit_temperature, PlattConfig, PlattFit, TemperatureFit, T_GRID_MAX, T_GRID_MIN, T_GRID_POINTS};

use crate::diffcore::kernels;
use crate::loss::{AffineMap, DistillLossConfig};
use crate::model::Head;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("empty input")]
    Empty,
    #[error("number of bins must be at least 1")]
    BadBins,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least {needed} validation examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("fit diverged: NLL rose for {0} consecutive iterations")]
    Diverged(usize),
    #[error("non-finite NLL during fitting")]
    NonFinite,
}

/// A fitted post-hoc map from logits to calibrated logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum CalibrationMap {
    Temperature { t: f64 },
    /// `u = W z + b`, `weight` row-major `c×c`.
    Platt { weight: Vec<f64>, bias: Vec<f64> },
    /// `u_c = a_c z_c + b_c` for each class independently.
    PerClassPlatt { scale: Vec<f64>, bias: Vec<f64> },
}

impl CalibrationMap {
    pub fn identity_platt(classes: usize) -> Self {
        let AffineMap { weight, bias } = AffineMap::identity(classes);
        CalibrationMap::Platt { weight, bias }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            CalibrationMap::Temperature { .. } => "temperature",
            CalibrationMap::Platt { .. } => "platt",
            CalibrationMap::PerClassPlatt { .. } => "per-class-platt",
        }
    }

    /// Maps one row of logits.
    pub fn map_logits(&self, z: &[f64]) -> Vec<f64> {
        match self {
            CalibrationMap::Temperature { t } => z.iter().map(|v| v / t).collect(),
            CalibrationMap::Platt { weight, bias } => AffineMap { weight: weight.clone(), bias: bias.clone() }.apply(z),
            CalibrationMap::PerClassPlatt { scale, bias } => {
                z.iter().zip(scale).zip(bias).map(|((v, a), b)| a * v + b).collect()
            }
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            CalibrationMap::Temperature { .. } => None,
            CalibrationMap::Platt { bias, .. } | CalibrationMap::PerClassPlatt { bias, .. } => Some(bias.len()),
        }
    }

    /// Distillation loss that uses this map on both teacher and student.
    pub fn loss_config(&self, alpha: f64, head: Head) -> DistillLossConfig {
        let cfg = match self {
            CalibrationMap::Temperature { t } => DistillLossConfig::temperature(alpha, *t),
            CalibrationMap::Platt { weight, bias } => {
                DistillLossConfig::platt(alpha, AffineMap { weight: weight.clone(), bias: bias.clone() })
            }
            CalibrationMap::PerClassPlatt { scale, bias } => {
                DistillLossConfig::platt(alpha, AffineMap::diagonal(scale, bias))
            }
        };
        cfg.with_head(head)
    }
}

/// Row-wise probabilities for a head: softmax or element-wise sigmoid.
pub fn probabilities(logits: &[f64], classes: usize, head: Head) -> Vec<f64> {
    match head {
        Head::Softmax => kernels::softmax_rows(logits, classes),
        Head::Sigmoid => logits.iter().map(|&v| kernels::sigmoid(v)).collect(),
    }
}

/// Calibrated distribution for each row of `logits` (`n×classes`).
pub fn apply_calibration(map: &CalibrationMap, logits: &[f64], classes: usize, head: Head) -> Vec<f64> {
    let mapped: Vec<f64> = logits.chunks(classes).flat_map(|row| map.map_logits(row)).collect();
    probabilities(&mapped, classes, head)
}

/// Mean negative log-likelihood of `targets` (one-hot or multi-hot rows).
pub fn nll(logits: &[f64], targets: &[f64], classes: usize, head: Head) -> f64 {
    let n = logits.len() / classes.max(1);
    let total: f64 = match head {
        Head::Softmax => logits
            .chunks(classes)
            .zip(targets.chunks(classes))
            .map(|(z, y)| {
                let lse = kernels::log_sum_exp(z);
                z.iter().zip(y).filter(|(_, &yv)| yv != 0.0).map(|(&zv, &yv)| -yv * (zv - lse)).sum::<f64>()
            })
            .sum(),
        Head::Sigmoid => logits
            .iter()
            .zip(targets)
            .map(|(&z, &y)| -(y * kernels::log_sigmoid(z) + (1.0 - y) * kernels::log_sigmoid(-z)))
            .sum(),
    };
    total / n.max(1) as f64
}
