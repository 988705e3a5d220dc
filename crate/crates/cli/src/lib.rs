//! Experiment runner for the dagfl simulator: JSON experiment specs,
//! built-in recipes, CSV output and summaries.

pub mod error;
pub mod recipes;
pub mod runner;
pub mod spec;
pub mod summary;

pub use error::{CliError, Result};
pub use spec::ExperimentSpec;
