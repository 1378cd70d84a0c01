//! File formats, experiment orchestration and the `hetcp` command line.

pub mod checkpoint;
pub mod cli;
pub mod config_io;
pub mod dataset;
pub mod error;
pub mod model_io;
pub mod parallel;
pub mod report;
pub mod run;

pub use error::{CliError, ErrorKind, Result};
