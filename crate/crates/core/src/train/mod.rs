//! Desk-scale CNN training: data, model, optimizer, trainers and the
//! comparison harness.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;

/// Random stream ids derived from the configured seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_MASKS: u64 = 3;

pub use compare::{run_comparison, ComparisonTable, OrderingReport, StageRow};
pub use config::{DatasetConfig, ModelConfig, TrainConfig};
pub use data::{Dataset, SyntheticSpec};
pub use metrics::{MetricsRow, METRICS_HEADER};
pub use model::{ModelSpec, Network, ParamGrads};
pub use optim::{Sgd, SgdConfig};
pub use trainer::{accuracy, train, rblock_step, single_step, train_rblock, train_single, TrainError, TrainOutcome};
