//! Experiment driver for confidence-calibrated active learning: configuration,
//! multi-seed runs, tables and figures, and the HTTP annotation service.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod serve;

pub use config::{ExperimentConfig, Overrides, Protocol, Variant};
pub use error::{HarnessError, Result};
