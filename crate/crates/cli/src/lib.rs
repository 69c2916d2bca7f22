//! Command-line front end for PGE transferability estimation.
//!
//! A run is described by one TOML file ([`config::RunConfig`]). Commands
//! validate it completely before loading data, write their reports under the
//! output directory, and append one [`record::ResultRecord`] per invocation
//! to `results.jsonl`. PGE binaries and pretrained source models are cached
//! by content hash ([`cache::Cache`]).

pub mod cache;
pub mod commands;
pub mod config;
pub mod error;
pub mod record;

pub use error::CliError;
