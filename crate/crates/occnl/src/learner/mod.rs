//! The training stack: a small per-voxel classifier, its EMA teacher, class
//! prototype maintenance, the two-stage training loop, and checkpointing.

mod checkpoint;
mod model;
mod prototypes;
mod train;

pub use checkpoint::{
    read_checkpoint, read_checkpoint_file, read_checkpoint_from_slice, write_checkpoint,
    write_checkpoint_file, Checkpoint, CheckpointError,
};
pub use model::{ema_update, Architecture, ModelParams, StudentModel, TeacherState};
pub use prototypes::{update_prototypes, PrototypeBank};
pub use train::{
    history_to_csv, predict, train, EpochRecord, EvalSample, KStrategy, LossComponents,
    LrSchedule, SceneSample, StepRecord, TrainConfig, TrainDataset, TrainOutcome,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model shapes do not match: {0}")]
    ShapeMismatch(String),
    #[error("training config invalid: {0}")]
    InvalidConfig(String),
    #[error("dataset invalid: {0}")]
    InvalidDataset(String),
    #[error("training diverged at epoch {epoch}, step {step}: total loss {value}")]
    Diverged { epoch: usize, step: usize, value: f64 },
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Candidate(#[from] crate::candidate::CandidateError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Voxel(#[from] crate::voxel::VoxelError),
}
