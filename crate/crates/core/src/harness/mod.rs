//! Everything around the model: dataset files, synthetic corpora, training,
//! metrics, checkpoints and gate reports.

pub mod checkpoint;
pub mod data;
pub mod gate_report;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use data::{Dataset, DatasetFiles, Encoder, Task};
pub use metrics::{evaluate, MetricSet};
pub use optim::{Optimizer, OptimizerConfig};
pub use train::{train, TrainConfig, TrainHistory};
