//! Optimization: masked-LM pretraining, supervised fine-tuning, gradient checking and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod mlm;
pub mod optim;
pub mod trainer;

pub use config::{MlmConfig, TrainConfig, FULL_SCALE_LEARNING_RATE, RATIONALE_WEIGHT_GRID};
pub use optim::Adam;
pub use trainer::{train, train_with, EpochMetrics, TrainOutcome};
