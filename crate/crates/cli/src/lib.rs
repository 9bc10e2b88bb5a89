//! Command-line orchestration of the segmentation pipeline: synthetic data,
//! encoder training, projector fitting, segmentation, evaluation and export.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::{resolve_split, seeded_split, EvalOn, RunConfig};
pub use error::CliError;
