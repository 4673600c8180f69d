//! Command-line front end: configuration-driven simulation, retrieval and fitting runs
//! with manifests, and the acceptance suite.

// `!(x > 0.0)` is used on purpose to reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod validate;

pub use error::{CliError, Result, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
pub use manifest::RunManifest;
