//! Multi-modal physiological time-series pipeline: preprocessing, a fusion
//! multi-scale patch transformer for window representations, trend-aware
//! auto-regressive pretraining, linear classifiers and clinical metrics.

pub mod autograd;
pub mod classify;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod preprocessing;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
