//! Losses, target construction, Adam and the training loop.

mod adam;
mod loss;
mod targets;
mod trainer;

pub use adam::Adam;
pub use loss::{activity_loss, boundary_loss, total_loss};
pub use targets::{activity_targets, boundary_targets, positive_weights, ChunkTargets};
pub use trainer::{
    chunk_losses, chunk_step, evaluate_model, model_grad_check, prepare_chunks, train, BatchExecutor, ChunkStats, EpochMetrics, NoopObserver, PreparedChunk, Sequential, TrainConfig,
    TrainObserver, TrainOutcome,
};
