//! Calibration-sensitive distillation losses.
//!
//! Per example, with student logits `z_s`, teacher logits `z_t` and target `y`:
//!
//! * temperature: `k·α·KL(softmax(z_s/T), softmax(z_t/T)) + (1−α)·CE(y, softmax(z_s))`
//!   where `k = 2T²` (default) or `T²` ([`KdFactor::Conventional`]);
//! * platt: `α·KL(softmax(W z_s + b), softmax(W z_t + b)) + (1−α)·CE(y, softmax(z_s))`
//!   with the affine map held fixed;
//! * plain: the temperature loss at `T = 1` with factor 1 (the uncalibrated
//!   iterative-distillation baseline).
//!
//! For sigmoid heads the categorical KL and CE become sums of per-class
//! Bernoulli terms. The batch loss is the mean of the per-example terms.
//!
//! Functions in this module evaluate in plain `f64`; [`graph`] builds the same
//! losses on a [`crate::diffcore::Graph`] for training.

pub mod graph;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::kernels;
use crate::model::Head;

/// Probabilities are clamped here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_EVENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of times [`cross_entropy`] clamped a zero probability at a true
/// class since process start.
pub fn clamp_events() -> usize {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss mode mismatch: expected {expected}")]
    WrongMode { expected: &'static str },
    #[error("affine map is {rows}x{cols} with bias {bias}, but there are {classes} classes")]
    MapShape { rows: usize, cols: usize, bias: usize, classes: usize },
    #[error("row {row}: expected {expected} values, got {got}")]
    RowLength { row: usize, expected: usize, got: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// Affine map `u = W z + b` over logits; `weight` is row-major `c×c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn identity(c: usize) -> Self {
        let mut weight = vec![0.0; c * c];
        for i in 0..c {
            weight[i * c + i] = 1.0;
        }
        Self { weight, bias: vec![0.0; c] }
    }

    pub fn diagonal(scale: &[f64], bias: &[f64]) -> Self {
        let c = scale.len();
        let mut weight = vec![0.0; c * c];
        for i in 0..c {
            weight[i * c + i] = scale[i];
        }
        Self { weight, bias: bias.to_vec() }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn check(&self, classes: usize) -> Result<(), LossError> {
        let c = self.bias.len();
        if c != classes || self.weight.len() != c * c {
            return Err(LossError::MapShape {
                rows: if c == 0 { 0 } else { self.weight.len() / c.max(1) },
                cols: c,
                bias: self.bias.len(),
                classes,
            });
        }
        Ok(())
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let c = self.bias.len();
        (0..c)
            .map(|i| {
                let row = &self.weight[i * c..(i + 1) * c];
                row.iter().zip(z).fold(self.bias[i], |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }

    /// `Wᵀ` row-major, the right operand for `z · Wᵀ`.
    pub fn weight_transposed(&self) -> Vec<f64> {
        let c = self.bias.len();
        let mut t = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                t[j * c + i] = self.weight[i * c + j];
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LossMode {
    Temperature { t: f64 },
    Platt { map: AffineMap },
    Plain,
}

/// Order of the arguments to the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    #[default]
    AsWritten,
    /// `KL(teacher ‖ student)`.
    TeacherFirst,
}

/// Leading factor of the temperature-mode KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdFactor {
    /// `2T²`
    #[default]
    AsWritten,
    /// `T²`
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillLossConfig {
    pub alpha: f64,
    pub mode: LossMode,
    pub kl_direction: KlDirection,
    pub kd_factor: KdFactor,
    pub head: Head,
}

impl DistillLossConfig {
    pub fn temperature(alpha: f64, t: f64) -> Self {
        Self {
            alpha,
            mode: LossMode::Temperature { t },
            kl_direction: KlDirection::AsWritten,
            kd_factor: KdFactor::AsWritten,
            head: Head::Softmax,
        }
    }

    pub fn platt(alpha: f64, map: AffineMap) -> Self {
        Self { mode: LossMode::Platt { map }, ..Self::temperature(alpha, 1.0) }
    }

    pub fn plain(alpha: f64) -> Self {
        Self { mode: LossMode::Plain, ..Self::temperature(alpha, 1.0) }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self, classes: usize) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::BadAlpha(self.alpha));
        }
        match &self.mode {
            LossMode::Temperature { t } if !(*t > 0.0 && t.is_finite()) => Err(LossError::BadTemperature(*t)),
            LossMode::Platt { map } => map.check(classes),
            _ => Ok(()),
        }
    }

    /// Multiplier on the KL term.
    pub fn kl_weight(&self) -> f64 {
        match self.mode {
            LossMode::Temperature { t } => {
                let k = match self.kd_factor {
                    KdFactor::AsWritten => 2.0 * t * t,
                    KdFactor::Conventional => t * t,
                };
                k * self.alpha
            }
            LossMode::Platt { .. } | LossMode::Plain => self.alpha,
        }
    }

    /// Logit transform applied to both student and teacher before the KL term.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        match &self.mode {
            LossMode::Temperature { t } => z.iter().map(|v| v / t).collect(),
            LossMode::Platt { map } => map.apply(z),
            LossMode::Plain => z.to_vec(),
        }
    }
}

/// Targets for one batch: one-hot (or multi-hot) rows and teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub onehot: Vec<Vec<f64>>,
    pub teacher_logits: Vec<Vec<f64>>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    kernels::softmax_rows(z, z.len().max(1))
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| kernels::sigmoid(v)).collect()
}

/// `softmax(z / T)`
pub fn soften(logits: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
    softmax(&scaled)
}

fn clamped_ln(p: f64, count: bool) -> f64 {
    if p < PROB_FLOOR {
        if count {
            CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        }
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// `−Σ_c y_c ln ŷ_c` with `ŷ` clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], onehot: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(onehot)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| y * clamped_ln(p, true))
        .sum::<f64>()
}

/// Sum over classes of binary cross-entropy for independent sigmoid outputs.
pub fn binary_cross_entropy(probs: &[f64], targets: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let mut acc = 0.0;
            if y != 0.0 {
                acc += y * clamped_ln(p, true);
            }
            if y != 1.0 {
                acc += (1.0 - y) * clamped_ln(1.0 - p, true);
            }
            acc
        })
        .sum::<f64>()
}

/// `Σ_c p_c ln(p_c / q_c)` with `0·ln 0 = 0` and `q` clamped at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - clamped_ln(qv, false)))
        .sum()
}

/// Sum over classes of `KL(Bernoulli(p_c) ‖ Bernoulli(q_c))`.
pub fn bernoulli_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pv, &qv)| kl_divergence(&[pv, 1.0 - pv], &[qv, 1.0 - qv]))
        .sum()
}

fn head_probs(head: Head, z: &[f64]) -> Vec<f64> {
    match head {
        Head::Softmax => softmax(z),
        Head::Sigmoid => sigmoid(z),
    }
}

/// Per-example loss term for any mode.
pub fn example_loss(student: &[f64], onehot: &[f64], teacher: &[f64], cfg: &DistillLossConfig) -> f64 {
    let ps = head_probs(cfg.head, &cfg.transform(student));
    let pt = head_probs(cfg.head, &cfg.transform(teacher));
    let (first, second) = match cfg.kl_direction {
        KlDirection::AsWritten => (&ps, &pt),
        KlDirection::TeacherFirst => (&pt, &ps),
    };
    let kl = match cfg.head {
        Head::Softmax => kl_divergence(first, second),
        Head::Sigmoid => bernoulli_kl(first, second),
    };
    let raw = head_probs(cfg.head, student);
    let ce = match cfg.head {
        Head::Softmax => cross_entropy(&raw, onehot),
        Head::Sigmoid => binary_cross_entropy(&raw, onehot),
    };
    cfg.kl_weight() * kl + (1.0 - cfg.alpha) * ce
}

fn per_example(
    student_logits: &[Vec<f64>],
    targets: &BatchTargets,
    cfg: &DistillLossConfig,
) -> Result<Vec<f64>, LossError> {
    let classes = student_logits.first().map_or(0, Vec::len);
    cfg.validate(classes)?;
    let m = student_logits.len();
    for rows in [&targets.onehot, &targets.teacher_logits] {
        if rows.len() != m {
            return Err(LossError::RowLength { row: rows.len().min(m), expected: m, got: rows.len() });
        }
    }
    for (row, ((s, y), t)) in student_logits.iter().zip(&targets.onehot).zip(&targets.teacher_logits).enumerate() {
        for v in [s.len(), y.len(), t.len()] {
            if v != classes {
                return Err(LossError::RowLength { row, expected: classes, got: v });
            }
        }
    }
    Ok(student_logits
        .iter()
        .zip(&targets.onehot)
        .zip(&targets.teacher_logits)
        .map(|((s, y), t)| example_loss(s, y, t, cfg))
        .collect())
}

/// Temperature-scaled distillation terms `E_j`, one per example.
pub fn temperature_loss(
    student_logits: &[Vec<f64>],
    targets: &BatchTargets,
    cfg: &DistillLossConfig,
) -> Result<Vec<f64>, LossError> {
    if !matches!(cfg.mode, LossMode::Temperature { .. }) {
        return Err(LossError::WrongMode { expected: "temperature" });
    }
    per_example(student_logits, targets, cfg)
}

/// Platt (matrix-scaling) distillation terms `E_j`, one per example.
pub fn platt_loss(
    student_logits: &[Vec<f64>],
    targets: &BatchTargets,
    cfg: &DistillLossConfig,
) -> Result<Vec<f64>, LossError> {
    if !matches!(cfg.mode, LossMode::Platt { .. }) {
        return Err(LossError::WrongMode { expected: "platt" });
    }
    per_example(student_logits, targets, cfg)
}

/// Uncalibrated baseline terms.
pub fn plain_loss(
    student_logits: &[Vec<f64>],
    targets: &BatchTargets,
    cfg: &DistillLossConfig,
) -> Result<Vec<f64>, LossError> {
    if !matches!(cfg.mode, LossMode::Plain) {
        return Err(LossError::WrongMode { expected: "plain" });
    }
    per_example(student_logits, targets, cfg)
}

/// Mean of the per-example terms.
pub fn batch_loss(terms: &[f64]) -> Result<f64, LossError> {
    if terms.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}
