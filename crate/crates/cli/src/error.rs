//! CLI error type: a kind tag for machine-readable stderr output plus the
//! process exit code.
//!
//! Exit codes: 0 success/pass, 1 check failure, 2 usage error (produced by
//! the argument parser), 3 I/O error, 4 data validation error.

use std::path::Path;

use crate::format::FormatError;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DATA: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: format!("{}: {err}", path.display()),
            code: EXIT_IO,
        }
    }

    pub fn data(kind: &'static str, message: String) -> Self {
        Self {
            kind,
            message,
            code: EXIT_DATA,
        }
    }

    pub fn model_file(err: FormatError) -> Self {
        let kind = match &err {
            FormatError::BadMagic => "bad_magic",
            FormatError::VersionMismatch { .. } => "version_mismatch",
            FormatError::Truncated(_) | FormatError::ChecksumMismatch { .. } => "corrupt_model",
            FormatError::Layout(_) => "corrupt_model",
            FormatError::MalformedMeta(_) => "malformed_meta",
            FormatError::BackboneMismatch(_) => "backbone_mismatch",
            FormatError::Model(_) => "invalid_config",
        };
        Self {
            kind,
            message: err.to_string(),
            code: EXIT_IO,
        }
    }
}
