//! Command-line front end: configuration, frame and flow file formats,
//! experiment drivers and the `svedit` subcommands.

pub mod clipdir;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod pnm;

pub use config::Config;
pub use error::{CliError, CliResult};
