//! The `poe` pipeline driver and the model-query HTTP service.

pub mod cli;
pub mod server;

pub use cli::{run, Cli, ExitStatus};
