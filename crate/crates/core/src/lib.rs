//! Pool-based active learning whose query confidence is calibrated during
//! training by a shared network with a classifier head and an energy head.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: dataset ingestion, synthetic Gaussian clouds, pool partitions.
//! - [`model`]: the multi-head network, softmax posterior and unnormalised log-density.
//! - [`sgld`]: Langevin sampling of negatives with informative initialisation.
//! - [`trainer`]: the joint cross-entropy + maximum-likelihood objective.
//! - [`calibration`]: ECE, reliability tables and temperature scaling.
//! - [`query`]: least-confidence, equal-class and random query strategies.
//! - [`orchestrator`]: the train / query / annotate / evaluate loop.

pub mod calibration;
pub mod data;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod query;
pub mod sgld;
pub mod trainer;

pub use error::{Error, Result};
