//! Objectives, metrics and the training loop.

mod loss;
mod metrics;
mod trainer;

pub use loss::{
    instructor_loss, instructor_objective, minimax_loss, reconstruction_loss, vapaad_loss,
    vapaad_objective, LOG_EPS,
};
pub use metrics::{Metrics, MetricsAccumulator};
pub use trainer::{evaluate, LossMode, StepRecord, TrainConfig, Trainer};
