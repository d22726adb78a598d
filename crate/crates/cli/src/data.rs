//! File loading: JSON config, JSONL byte records (training data and probes),
//! and JSONL rubric scores.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use sidecar_core::{ModelConfig, ProbeSet, ScoredResponse, TrainBatch};

use crate::error::CliError;

/// One line of a byte-record JSONL file; the `bytes` field carries text
/// whose raw bytes become token ids.
#[derive(Deserialize)]
struct BytesRecord {
    bytes: String,
}

pub fn load_config(path: &Path) -> Result<ModelConfig, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config: ModelConfig = serde_json::from_str(&raw)
        .map_err(|e| CliError::data("malformed_config", format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn load_byte_lines(path: &Path) -> Result<Vec<Vec<usize>>, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: BytesRecord = serde_json::from_str(line).map_err(|e| {
            CliError::data(
                "malformed_jsonl",
                format!("{} line {}: {e}", path.display(), lineno + 1),
            )
        })?;
        out.push(
            record
                .bytes
                .as_bytes()
                .iter()
                .map(|&b| b as usize)
                .collect(),
        );
    }
    if out.is_empty() {
        return Err(CliError::data(
            "empty_input",
            format!("{} contains no records", path.display()),
        ));
    }
    Ok(out)
}

/// Loads training text and chunks it into next-token batches. Sequences are
/// truncated to the model's window; batches hold up to `batch_size` pairs.
pub fn load_train_batches(
    path: &Path,
    max_seq_len: usize,
    vocab_size: usize,
    batch_size: usize,
) -> Result<Vec<TrainBatch>, CliError> {
    let mut seqs = load_byte_lines(path)?;
    for (i, seq) in seqs.iter_mut().enumerate() {
        if let Some(&bad) = seq.iter().find(|&&t| t >= vocab_size) {
            return Err(CliError::data(
                "token_out_of_range",
                format!(
                    "{} record {}: byte {bad} exceeds vocab {vocab_size}",
                    path.display(),
                    i + 1
                ),
            ));
        }
        seq.truncate(max_seq_len + 1);
        if seq.len() < 2 {
            return Err(CliError::data(
                "record_too_short",
                format!(
                    "{} record {}: needs at least 2 bytes",
                    path.display(),
                    i + 1
                ),
            ));
        }
    }
    let mut batches = Vec::new();
    for chunk in seqs.chunks(batch_size) {
        batches.push(
            TrainBatch::from_sequences(chunk)
                .map_err(|e| CliError::data("invalid_batch", e.to_string()))?,
        );
    }
    Ok(batches)
}

/// Loads a probe set. Probes must already fit the model window; silently
/// truncating an evaluation input would change what is being measured.
pub fn load_probes(
    path: &Path,
    max_seq_len: usize,
    vocab_size: usize,
) -> Result<ProbeSet, CliError> {
    let seqs = load_byte_lines(path)?;
    for (i, seq) in seqs.iter().enumerate() {
        if seq.len() > max_seq_len {
            return Err(CliError::data(
                "probe_too_long",
                format!(
                    "{} record {}: {} bytes exceeds max_seq_len {max_seq_len}",
                    path.display(),
                    i + 1,
                    seq.len()
                ),
            ));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= vocab_size) {
            return Err(CliError::data(
                "token_out_of_range",
                format!(
                    "{} record {}: byte {bad} exceeds vocab {vocab_size}",
                    path.display(),
                    i + 1
                ),
            ));
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ProbeSet::new(name, seqs).map_err(|e| CliError::data("invalid_probes", e.to_string()))
}

/// Loads rubric-scored responses, one JSON object per line.
pub fn load_scores(path: &Path) -> Result<Vec<ScoredResponse>, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoredResponse = serde_json::from_str(line).map_err(|e| {
            CliError::data(
                "malformed_jsonl",
                format!("{} line {}: {e}", path.display(), lineno + 1),
            )
        })?;
        out.push(record);
    }
    Ok(out)
}
