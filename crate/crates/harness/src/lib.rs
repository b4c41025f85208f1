//! Experiment runner: configuration, pipelines, checkpoints and reports.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Method, Model, RawConfig};
pub use error::{HarnessError, Result};
pub use pipeline::{load_data, run, Data, Run};
pub use report::RunReport;
