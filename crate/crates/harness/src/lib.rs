//! Training harness for hybrid conv/attention models: datasets, AdamW with a
//! warmup and cosine schedule, scheduled mixer switches, checkpoints and the
//! interpolation experiment.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod interp;
pub mod metrics;
pub mod optim;
pub mod train;

pub use config::{DatasetId, TrainConfig};
pub use data::{CifarVariant, Dataset, Split};
pub use error::{Error, Result};
pub use metrics::{EpochMetrics, EvalMetrics, SwitchRecord};
pub use optim::{AdamW, LrSchedule};
pub use train::{evaluate, load_datasets, train_to_dir, Datasets, TrainState};
