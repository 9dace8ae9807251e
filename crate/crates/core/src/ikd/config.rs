use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IkdError;
use crate::calibration::DEFAULT_BINS;
use crate::data::DEFAULT_BALANCE_THRESHOLD;
use crate::loss::{KdFactor, KlDirection};

/// Distillation method for a ladder run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Uncalibrated distillation baseline (T = 1, no fitted map).
    #[serde(rename = "ikd")]
    Ikd,
    #[serde(rename = "ikd+temp")]
    IkdTemperature,
    #[serde(rename = "ikd+platt")]
    IkdPlatt,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ikd => "ikd",
            Method::IkdTemperature => "ikd+temp",
            Method::IkdPlatt => "ikd+platt",
        }
    }

    pub fn is_calibrated(&self) -> bool {
        !matches!(self, Method::Ikd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = IkdError;

    fn from_str(s: &str) -> Result<Self, IkdError> {
        match s {
            "ikd" => Ok(Method::Ikd),
            "ikd+temp" | "ikd+temperature" => Ok(Method::IkdTemperature),
            "ikd+platt" => Ok(Method::IkdPlatt),
            other => Err(IkdError::Config(format!("unknown method `{other}` (expected ikd, ikd+temp or ikd+platt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    pub k: usize,
    pub p: f64,
    pub alpha: f64,
    pub method: Method,
    pub teacher_epochs: usize,
    pub epochs_per_step: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    pub n_bins: usize,
    pub kl_direction: KlDirection,
    pub kd_factor: KdFactor,
    /// Fraction of the training data held out for validation.
    pub val_fraction: f64,
    /// Oversampling target as a fraction of the reference class count;
    /// 0 turns balancing off.
    pub balance_threshold: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            k: 5,
            p: 0.5,
            alpha: 0.7,
            method: Method::IkdTemperature,
            teacher_epochs: 30,
            epochs_per_step: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            seed: 0,
            n_bins: DEFAULT_BINS,
            kl_direction: KlDirection::AsWritten,
            kd_factor: KdFactor::AsWritten,
            val_fraction: 0.2,
            balance_threshold: DEFAULT_BALANCE_THRESHOLD,
        }
    }
}

impl LadderConfig {
    pub fn validate(&self) -> Result<(), IkdError> {
        let bad = |m: String| Err(IkdError::Config(m));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p must lie in (0, 1), got {}", self.p));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.n_bins == 0 {
            return bad("n_bins must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.balance_threshold) {
            return bad(format!("balance_threshold must lie in [0, 1], got {}", self.balance_threshold));
        }
        Ok(())
    }
}

/// Independent seed for a named purpose, derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub(crate) mod streams {
    pub const SPLIT: u64 = 1;
    pub const BALANCE: u64 = 2;
    pub const TEACHER_INIT: u64 = 3;
    pub const TEACHER_SHUFFLE: u64 = 4;
    pub const TEST_SPLIT: u64 = 5;
    pub const STUDENT_INIT: u64 = 100;
    pub const STUDENT_SHUFFLE: u64 = 200;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = LadderConfig::default();
        assert_eq!((c.k, c.p, c.alpha, c.batch_size), (5, 0.5, 0.7, 16));
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.adam_betas, (0.9, 0.999));
        assert!(c.validate().is_ok());
        assert!(LadderConfig { k: 0, ..c.clone() }.validate().is_err());
        assert!(LadderConfig { alpha: 1.5, ..c }.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Ikd, Method::IkdTemperature, Method::IkdPlatt] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("kd".parse::<Method>().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, 3), derive_seed(1, 4));
        assert_eq!(derive_seed(1, 3), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 3), derive_seed(2, 3));
    }
}
