//! Losses, metrics, optimizers, the training loop and the experiment grid.

mod grid;
mod metrics;
mod optim;
mod trainer;

use thiserror::Error;

pub use grid::{
    run_experiment, run_grid, Annotation, CellMetrics, CellOutcome, Experiment, GridCell, GridReport, GridSetup,
    GRID_FORMAT_VERSION, DEFAULT_CASES, REFERENCE_RANKING,
};
pub use metrics::{mse, mse_loss, r_squared, RSquared};
pub use optim::{clip_grad_norm, AdamParams, Optimizer, OptimizerKind};
pub use trainer::{
    batch_gradients, evaluate, predict_normalized, train, validation_loss, EpochRecord, EvalReport, TrainConfig,
    TrainLog,
};

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite validation loss at epoch {epoch}")]
    NonFiniteValidation { epoch: usize },
    #[error("non-finite gradient in parameter \"{0}\"")]
    NonFiniteGradient(String),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model and dataset disagree: {0}")]
    Incompatible(String),
}

#[cfg(test)]
mod tests;
