//! Command-line front end: spec validation, pattern generation, pruning of
//! SKT tensor files and compression quotes.

pub mod commands;
pub mod skt;

pub use commands::{main_with_args, run, Cli, CliError, Command};
