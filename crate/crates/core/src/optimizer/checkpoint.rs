//! Versioned, checksummed checkpoint files written atomically.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{OptimizerConfig, RunState};
use crate::corpus::DatasetSplits;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {message}")]
    Io { path: String, message: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint checksum mismatch (file corrupted)")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Example ids of each split, enough to rebuild the splits from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitIds {
    pub fn of(splits: &DatasetSplits) -> Self {
        let ids = |v: &[crate::corpus::Example]| v.iter().map(|e| e.id.clone()).collect();
        Self {
            train: ids(&splits.train),
            dev: ids(&splits.dev),
            test: ids(&splits.test),
            seed: splits.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: OptimizerConfig,
    pub splits: SplitIds,
    pub state: RunState,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn checksum(payload: &Value) -> String {
    hex::encode(Sha256::digest(payload.to_string().as_bytes()))
}

pub fn encode_checkpoint(checkpoint: &Checkpoint) -> Result<String, CheckpointError> {
    let payload = serde_json::to_value(checkpoint).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let doc = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "checksum": checksum(&payload),
        "payload": payload,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn decode_checkpoint(text: &str) -> Result<Checkpoint, CheckpointError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let version = doc
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| CheckpointError::Malformed("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let stored = doc
        .get("checksum")
        .and_then(Value::as_str)
        .ok_or_else(|| CheckpointError::Malformed("missing checksum".into()))?;
    let payload = doc
        .get("payload")
        .ok_or_else(|| CheckpointError::Malformed("missing payload".into()))?;
    if checksum(payload) != stored {
        return Err(CheckpointError::Checksum);
    }
    serde_json::from_value(payload.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Writes via a temporary file in the same directory, then renames.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let text = encode_checkpoint(checkpoint)?;
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&text)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}
