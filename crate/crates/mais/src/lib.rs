//! Experiment drivers, file formats and the acceptance checks built on
//! `mais-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod ipfile;
pub mod manifest;
pub mod output;

/// Environment variable read when `--workers` is absent.
pub const WORKERS_ENV: &str = "MAIS_WORKERS";
