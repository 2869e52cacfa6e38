//! Everything around the core algorithms that touches the outside world:
//! model and trace files, the JSON run configuration with dotted-path
//! overrides, report writers, and the `apd-lab` command implementations.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod model_store;
pub mod qa;
pub mod report;
pub mod trace_store;

pub use error::{LabError, Result};
