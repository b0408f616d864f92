//! File formats, experiment runner and command-line front end for
//! [`cpl_core`].

mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod reference;
pub mod report;
pub mod run;
pub mod steplog;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
