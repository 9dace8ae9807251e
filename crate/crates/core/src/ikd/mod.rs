//! Iterative distillation ladder: teacher training, refinement, distillation
//! steps and method comparison.

mod adam;
mod config;
mod ladder;
mod run_dir;
mod train;

use thiserror::Error;

pub use adam::{adam_update, AdamConfig, AdamState, AdamStep};
pub use config::{derive_seed, LadderConfig, Method};
pub(crate) use config::streams;
pub use ladder::{
    compare_methods, distill_step, fit_map, prepare_data, run_ladder, structure_ladder, train_teacher, BaseRecord,
    CalibratedMetrics, LadderModels, LadderReport, MethodRun, RunData, StepResult,
};
pub use run_dir::{write_manifest, write_run, Manifest, ManifestEntry};
pub use train::{dataset_logits, evaluate, fit, metrics_for_logits, EpochLog, Metrics, Objective, TrainLog};

use crate::calibration::CalibrationError;
use crate::data::DataError;
use crate::diffcore::GraphError;
use crate::loss::LossError;
use crate::model::{CheckpointError, ModelError, StructureError};

#[derive(Debug, Error)]
pub enum IkdError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss {value} while training {model} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss { model: String, epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
