//! Command-line front end for the `cfm` estimation library.

pub mod config;
pub mod run;

pub use config::{Cli, CliCommand, Command, Flags, RunConfig};
pub use run::{exit_code, run, Manifest, Outcome};
