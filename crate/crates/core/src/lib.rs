//! Exemplar-free class-incremental learning for multivariate time series.
//!
//! A frozen feature extractor is tuned through residual adapters, one cosine
//! head is added per task, and stored class Gaussians are carried across tasks
//! by a learned linear drift compensator before the classifier bank is
//! retrained on features sampled from them.

// `!(x > 0.0)` forms reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod dcn;
pub mod error;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod protocol;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
