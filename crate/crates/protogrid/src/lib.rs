//! Files, reports and command-line plumbing around `protogrid-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod exec;
pub mod experiment;
pub mod mnist;
pub mod report;
pub mod tensor_file;

pub use error::{Error, Result};
pub use protogrid_core as core;
