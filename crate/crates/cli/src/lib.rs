//! Configuration, artifact wiring and subcommands of the `varifocal` binary.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::Outcome;
pub use config::RunConfig;
