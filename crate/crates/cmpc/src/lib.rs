//! Files, command line and parameter sweep around the `cmpc-core` controller.

pub mod cli;
pub mod config;
pub mod io;
pub mod sweep;

pub use cmpc_core;
