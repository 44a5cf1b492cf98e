//! Batching, optimization, checkpointing, and training-loop
//! orchestration for both stages.

pub mod adam;
pub mod batch;
pub mod trainer;

#[cfg(test)]
mod tests;

pub use adam::{Adam, AdamConfig};
pub use batch::{batch_for_step, batches_per_epoch, epoch_batches, fit_example};
pub use trainer::{latest_checkpoint, train_loop, LossRecord, TrainConfig, TrainSummary, Trainer};
