//! Recurrent language models compared under fixed parameter budgets.
//!
//! The crate covers the whole experimental loop: a small reverse-mode
//! autodiff substrate, LSTM and recurrent-highway cells, budget-driven model
//! sizing, truncated-BPTT training with Adam, batch-1 evaluation, a
//! Gaussian-process tuner and the seed/sensitivity analyses run on its output.

pub mod analysis;
pub mod autodiff;
pub mod cells;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod params;
pub mod trainer;
pub mod tuner;

pub use error::{Error, Result};
