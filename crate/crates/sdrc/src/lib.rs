//! File formats, experiment configuration and the command-line driver for
//! [`sdrc_core`].
//!
//! - [`epds`]: the dataset file format.
//! - [`checkpoint`]: the tensor checkpoint format.
//! - [`config`]: the flat `key=value` experiment configuration.
//! - [`report`]: results JSON and CSV exports.
//! - [`cli`]: subcommand dispatch and exit codes.

mod binary;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod epds;
pub mod error;
pub mod report;

pub use error::{ConfigError, FormatError, Result, SdrcError};
