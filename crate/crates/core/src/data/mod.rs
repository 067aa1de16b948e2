//! Time-series samples, task streams, and everything that produces them:
//! the on-disk dataset format, the synthetic generator, class-disjoint task
//! splitting and per-task PCA channel reduction.

mod io;
mod pca;
mod split;
mod synthetic;

pub use io::{load_dataset, write_dataset, DatasetMeta};
pub use pca::{pca_reduce, PcaProjection};
pub use split::{split_tasks, Task, TaskStream};
pub use synthetic::{make_synthetic, DriftProfile, SyntheticConfig};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// One multivariate series, `values` shaped `[channels × length]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    pub values: Tensor,
    pub label: usize,
}

impl TimeSeriesSample {
    pub fn new(values: Tensor, label: usize) -> Result<Self> {
        if values.shape().len() != 2 {
            return contract(format!(
                "sample must be channels x length, got {:?}",
                values.shape()
            ));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return contract("sample contains non-finite values");
        }
        Ok(Self { values, label })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[1]
    }
}
