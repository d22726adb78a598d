//! File formats and loaders behind the `sidecar` binary: the model file
//! codec, JSONL readers for training data, probes, and rubric scores, and
//! the CLI error type with its exit-code mapping.

pub mod data;
pub mod error;
pub mod format;

pub use error::CliError;
