//! Normalization-statistics laboratory.
//!
//! Batch construction strategies for BatchNorm, estimators of population
//! statistics, a small network with exact backpropagation, and scenario
//! runners that reproduce train/test inconsistencies on synthetic data.

pub mod batching;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod net;
pub mod norm;
pub mod stats;
pub mod tensor;

pub use error::{BnError, Result};
pub use metrics::ScenarioResult;
pub use tensor::{ChannelStats, Shape4, Tensor4};
