//! Checkpoint files: one JSON line, then a `sha256:` line over its bytes.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AgentState;
use crate::digest;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub session: String,
    pub seed: u64,
    /// Sequence number the next trace event will take.
    pub trace_next_seq: u64,
    pub reasoner: Value,
    pub state: AgentState,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
}

impl Checkpoint {
    pub fn encode(&self) -> String {
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        let sum = digest(body.as_bytes());
        format!("{body}\n{sum}\n")
    }

    pub fn decode(text: &str) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        let mut lines = text.lines();
        let body = lines.next().ok_or_else(|| corrupt("empty file"))?;
        let sum = lines.next().ok_or_else(|| corrupt("missing hash line"))?;
        if lines.any(|l| !l.is_empty()) {
            return Err(corrupt("trailing content after hash line"));
        }
        if sum != digest(body.as_bytes()) {
            return Err(corrupt("hash mismatch"));
        }
        let cp: Checkpoint = serde_json::from_str(body).map_err(|e| corrupt(&e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {}", cp.version)));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read_to_string(path)?)
    }
}

/// Drops trace lines at or past `next_seq`, left by work after the
/// checkpoint that the resumed run will redo.
pub fn trim_trace(path: &Path, next_seq: u64) -> io::Result<usize> {
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    let mut dropped = 0;
    for line in text.lines() {
        let seq = serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| v.get("seq").and_then(Value::as_u64));
        match seq {
            Some(s) if s >= next_seq => dropped += 1,
            _ => {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    if dropped > 0 {
        std::fs::write(path, kept)?;
    }
    Ok(dropped)
}
