//! Unsupervised training: patch sampling, siamese keypoint detection, TPS
//! solve, minimum-distance loss and Adam updates.

pub mod adam;
mod checkpoint;
pub mod config;
mod step;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{InferenceSettings, TrainConfig, TrainSettings};
pub use step::{pair_loss, pair_loss_and_grad, train_iteration, IterationReport};
pub use trainer::{lr_schedule, EpochSummary, LogRecord, Trainer};
