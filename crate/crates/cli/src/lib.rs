//! Command-line layer over `oat-core`: run configuration, checkpoints,
//! CSV/PGM export and the subcommand implementations used by the `oat` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod stats;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, Result};
