//! File formats, run configuration, experiment drivers and the command-line
//! interface for `ftp-core`.

pub mod bundled;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod gridfile;
pub mod labeled;
pub mod metrics;

pub use error::{FormatError, Result};
