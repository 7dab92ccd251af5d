//! Batch command-line interface for the auxgmm estimators.
//!
//! Three commands: `estimate` runs one estimator on a dataset file,
//! `simulate` runs a Monte Carlo study from a TOML configuration, and
//! `validate-data` checks a dataset file against the schema. Reports are
//! written both human-readable and machine-readable, always embedding the
//! fully resolved configuration so any run can be reproduced exactly.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use error::CliError;
