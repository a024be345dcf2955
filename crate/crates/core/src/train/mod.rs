//! Toy-scale training: synthetic data, loss, SGD and the checkpointing loop.

pub mod config;
pub mod data;
pub mod loss;
pub mod sgd;
pub mod trainer;

pub use config::{RunConfig, TrainConfig};
pub use data::{Dataset, Sample, ShapeKind, Split, SyntheticDatasetSpec};
pub use loss::{one_hot, segmentation_loss};
pub use sgd::{sgd_step, SgdParams, SgdState};
pub use trainer::{batch_gradients, checkpoint_path, evaluate_samples, log_to_jsonl, train, LogRecord, TrainOutcome};
