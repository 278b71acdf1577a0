//! vLinear: a linear-complexity multivariate time-series forecaster.
//!
//! The model mixes variate tokens with a rank-1 row-stochastic map (vecTrans),
//! learns temporal structure in an orthogonal basis fitted to the training
//! autocorrelation, and is trained with a final-series-oriented flow-matching
//! objective whose velocity head is a single linear layer. All gradients are
//! derived by hand and certified against central finite differences.

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod flowmatch;
pub mod linalg;
pub mod metrics;
pub mod mixers;
pub mod model;
pub mod train;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
