//! Data generation, training, inference, evaluation and persistence for
//! the co-saliency network, plus the `cosal` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod pnm;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
