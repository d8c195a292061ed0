//! Losses, optimizer, synthetic data, metrics and the training loop.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use loss::{ce_loss, dice_loss, segmentation_loss, total_loss, LossParts};
pub use metrics::{compute_metrics, ClassMetrics, MetricReport};
pub use optim::{sgd_update, Sgd};
pub use synth::{synth_task, SegBatch};
pub use train::{evaluate, train, train_with, LogRow, TrainConfig, TrainOutcome};
