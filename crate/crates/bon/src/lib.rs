//! File formats, checkpoints, the training harness and experiment
//! orchestration around `bon-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod format;
pub mod report;
pub mod train;

pub use config::TrainConfig;
pub use error::{BonError, Result};
