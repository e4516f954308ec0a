//! Evaluation CLI and HTTP session service for K2R pipelines.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod service;

pub use error::HarnessError;
pub use eval::{confidence_sweep, eval_task, EvalOutcome, EvalReport, EvalRunConfig};
