//! Append-only JSON-lines checkpoint: a header line, then one
//! [`RoundOutcome`] per line in commit order.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AlignError, RoundOutcome};
use crate::corpus::RoundKey;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub run_id: String,
    pub config_hash: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    header: CheckpointHeader,
    outcomes: Vec<RoundOutcome>,
    completed: HashMap<RoundKey, usize>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

fn io_err(path: &Path, e: std::io::Error) -> AlignError {
    AlignError::Checkpoint(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    /// Checkpoint kept only in memory.
    pub fn in_memory(run_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            header: CheckpointHeader { version: CHECKPOINT_VERSION, run_id: run_id.into(), config_hash: config_hash.into() },
            outcomes: Vec::new(),
            completed: HashMap::new(),
            sink: None,
        }
    }

    /// Opens an existing checkpoint for resuming, or starts a new one.
    ///
    /// A trailing line without a newline (a write cut short by a crash) is
    /// discarded and truncated away. Resuming with a different config hash
    /// fails with [`AlignError::ChecksumMismatch`].
    pub fn open(path: &Path, run_id: &str, config_hash: &str) -> Result<Self, AlignError> {
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        if !exists {
            let file = File::create(path).map_err(|e| io_err(path, e))?;
            let mut cp = Self::in_memory(run_id, config_hash);
            let mut w = BufWriter::new(file);
            serde_json::to_writer(&mut w, &cp.header).map_err(|e| AlignError::Checkpoint(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| io_err(path, e))?;
            w.flush().map_err(|e| io_err(path, e))?;
            cp.sink = Some((path.to_path_buf(), w));
            return Ok(cp);
        }

        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut reader = BufReader::new(file);
        let mut valid_len = 0u64;
        let mut line = String::new();
        let mut header: Option<CheckpointHeader> = None;
        let mut cp = Self::in_memory(run_id, config_hash);
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            let bad = |e: serde_json::Error| AlignError::Checkpoint(format!("{}: corrupt line: {e}", path.display()));
            match &header {
                None => {
                    let h: CheckpointHeader = serde_json::from_str(&line).map_err(bad)?;
                    if h.config_hash != config_hash {
                        return Err(AlignError::ChecksumMismatch { expected: h.config_hash, found: config_hash.into() });
                    }
                    header = Some(h);
                }
                Some(_) => cp.push(serde_json::from_str(&line).map_err(bad)?),
            }
            valid_len += n as u64;
        }
        cp.header = header.ok_or_else(|| AlignError::Checkpoint(format!("{}: missing header", path.display())))?;

        let mut file = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
        file.set_len(valid_len).map_err(|e| io_err(path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| io_err(path, e))?;
        cp.sink = Some((path.to_path_buf(), BufWriter::new(file)));
        Ok(cp)
    }

    /// Reads a checkpoint file without opening it for writing.
    pub fn read(path: &Path) -> Result<(CheckpointHeader, Vec<RoundOutcome>), AlignError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut lines = text.split_inclusive('\n').filter(|l| l.ends_with('\n'));
        let bad = |e: serde_json::Error| AlignError::Checkpoint(format!("{}: corrupt line: {e}", path.display()));
        let header: CheckpointHeader = serde_json::from_str(
            lines.next().ok_or_else(|| AlignError::Checkpoint(format!("{}: missing header", path.display())))?,
        )
        .map_err(bad)?;
        let outcomes = lines.map(|l| serde_json::from_str(l).map_err(bad)).collect::<Result<_, _>>()?;
        Ok((header, outcomes))
    }

    fn push(&mut self, outcome: RoundOutcome) {
        let key = outcome.round.key();
        match self.completed.get(&key) {
            Some(&i) => self.outcomes[i] = outcome,
            None => {
                self.completed.insert(key, self.outcomes.len());
                self.outcomes.push(outcome);
            }
        }
    }

    /// Appends a batch and flushes it to disk.
    pub fn commit(&mut self, batch: &[RoundOutcome]) -> Result<(), AlignError> {
        if let Some((path, w)) = &mut self.sink {
            for o in batch {
                serde_json::to_writer(&mut *w, o).map_err(|e| AlignError::Checkpoint(e.to_string()))?;
                w.write_all(b"\n").map_err(|e| io_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
        for o in batch {
            self.push(o.clone());
        }
        Ok(())
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn config_hash(&self) -> &str {
        &self.header.config_hash
    }

    pub fn outcomes(&self) -> &[RoundOutcome] {
        &self.outcomes
    }

    pub fn get(&self, key: &RoundKey) -> Option<&RoundOutcome> {
        self.completed.get(key).map(|&i| &self.outcomes[i])
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}
