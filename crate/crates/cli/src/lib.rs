//! Experiment runner around `cordp-core`: config documents, parameter
//! sweeps, CSV tables and protocol transcripts.

pub mod config;
pub mod error;
pub mod output;
pub mod runner;
pub mod secagg_cmd;
pub mod table3;

pub use config::{parse_config, ExperimentSpec};
pub use error::{CliError, CliResult};
pub use output::CsvRow;
