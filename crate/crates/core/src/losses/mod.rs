//! Training objectives: scheme residuals, the exact residual, multi-step
//! data losses, the joint T₀-centered functional, and the training loop.

mod collocation;
mod data;
mod norm;
mod residual;
mod train;

pub use collocation::{
    sample_collocation, split_samples, CollocationBatch, CollocationSpec, PhaseMode, ProgressiveSchedule, Tau, TimeMode,
};
pub use data::{data_loss, joint_loss, T0Centered, TrajectoryDataset};
pub use norm::NormSpec;
pub use residual::{
    exact_residual, exact_residual_forward, exact_residual_loss, residual_loss, scheme_residual,
    scheme_residual_forward, scheme_update_residual, LossEval, CHUNK_ROWS,
};
pub use train::{train, Checkpoint, TrainConfig, TrainRecord};
