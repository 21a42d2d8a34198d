//! Desk-scale pipeline around the MACMD decoder: synthetic data, training,
//! evaluation, checkpoints and the gradient-check suite behind the `macmd` CLI.

pub mod checkpoint;
pub mod dataset;
mod error;
pub mod eval;
pub mod gradsuite;
pub mod optim;
pub mod pgm;
pub mod train;

pub use error::{PipelineError, Result};
