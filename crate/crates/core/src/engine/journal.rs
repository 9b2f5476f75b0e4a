//! Append-only line-delimited journal (`journal.jsonl`) and its replay.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::state::{EngineSnapshot, JournalRecord, State};
use crate::canonical;

pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal corrupted at line {line} (expected seq {expected_seq}): {message}")]
    Corruption {
        line: usize,
        expected_seq: u64,
        message: String,
    },
}

pub(crate) struct JournalWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JournalWriter {
    pub fn open(dir: &Path) -> Result<Self, JournalError> {
        let io = |source| JournalError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(JOURNAL_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| JournalError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    /// Write and flush one record before the caller acknowledges anything.
    pub fn append(&mut self, record: &JournalRecord) -> Result<(), JournalError> {
        let line = canonical::to_line(record).expect("journal record serializes");
        writeln!(self.out, "{line}")
            .and_then(|()| self.out.flush())
            .map_err(|source| JournalError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

/// Rebuild engine state from `dir/journal.jsonl`. A missing or empty file is
/// an empty state.
pub(crate) fn replay_state(dir: &Path) -> Result<State, JournalError> {
    let path = dir.join(JOURNAL_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(source) => return Err(JournalError::Io { path, source }),
    };
    let mut state = State::default();
    let mut lines = text.split('\n').enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        let expected_seq = state.seq + 1;
        let corrupt = |message: String| JournalError::Corruption {
            line: i + 1,
            expected_seq,
            message,
        };
        if line.is_empty() {
            if lines.peek().is_none() {
                break;
            }
            return Err(corrupt("empty line".into()));
        }
        if lines.peek().is_none() {
            return Err(corrupt("truncated record (no line terminator)".into()));
        }
        let record: JournalRecord = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        if record.seq != expected_seq {
            return Err(corrupt(format!("found seq {}", record.seq)));
        }
        let applied = state
            .apply(&record.instance_id, record.event.clone())
            .map_err(corrupt)?;
        if applied.version != record.version {
            return Err(corrupt(format!(
                "version {} recorded, {} reconstructed",
                record.version, applied.version
            )));
        }
    }
    Ok(state)
}

/// Engine state rebuilt from the journal.
pub fn replay_journal(dir: &Path) -> Result<EngineSnapshot, JournalError> {
    replay_state(dir).map(|s| s.snap)
}
