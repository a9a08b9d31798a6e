//! Synthetic data, training loops, the canonical experiments and the CLI.

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod data;
pub mod experiments;
pub mod routing;
pub mod train;

pub use config::{ExperimentConfig, ExperimentKind, Precision};
pub use data::{gen_data, Sample, Split, SyntheticDataset};
pub use train::{run_training, MetricsRow, TrainOptions};
