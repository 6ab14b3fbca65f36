//! DE-SNE coreset selection.
//!
//! The pipeline embeds a dataset into two dimensions with t-SNE, calibrating
//! each point's Gaussian bandwidth to a target perplexity by differential
//! evolution, then partitions the embedding into a uniform grid and draws a
//! proportional random quota from every cell. An analytic model estimates
//! the DDR transfer energy of running the selection next to memory.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod distance;
pub mod embedding;
pub mod energy;
pub mod error;
pub mod grid;
pub mod json;
pub mod kernels;
pub mod perplexity;
pub mod pipeline;
pub mod report;
pub mod synthetic;

pub use dataset::{CoresetSelection, DatasetFormat, DatasetMatrix, NormalizeMode};
pub use distance::DistanceMatrix;
pub use embedding::{Embedding, LossTrace, TsneConfig};
pub use energy::{EnergyCoefficients, Method, TransferScenario};
pub use error::{Error, Result};
pub use grid::{CellAssignment, GridSpec};
pub use kernels::{Backend, KernelConfig};
pub use perplexity::{
    AffinityMatrix, DEConfig, Optimizer, OptimizerKind, SigmaSearch, SigmaVector,
};
pub use pipeline::{RunConfig, SampleOutcome};
