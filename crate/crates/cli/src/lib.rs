//! Command-line front end: file formats, run manifests and subcommands.

pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
pub mod plan;

pub use cli::{run, Cli};
pub use error::CliError;
