//! Seeded experiment runner for `finetune-core`: configs, sweeps and CSV output.

pub mod config;
pub mod error;
pub mod experiments;
pub mod stats;
pub mod table;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use table::{emit, ResultTable, Row};
