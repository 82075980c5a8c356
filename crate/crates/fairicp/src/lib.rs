//! File formats, experiment drivers and the command line around
//! [`fairicp_core`].

pub mod config;
pub mod error;
pub mod experiments;
pub mod io;

pub use error::{CliError, CliResult};
