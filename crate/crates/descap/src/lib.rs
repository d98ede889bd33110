//! Command-line front end, file formats and threading for `descap-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod runner;

pub use commands::run;
pub use error::{Error, ErrorKind, Result};
