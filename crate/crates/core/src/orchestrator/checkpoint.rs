//! Snapshots of a pipeline taken at stage boundaries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::GatewaySnapshot;
use crate::types::{CandidateSolution, RunState};

use super::judge::JudgeDecision;

pub const CHECKPOINT_VERSION: u32 = 1;

/// The finished result of a whole solve, stored in the last checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub solution: Option<CandidateSolution>,
    pub verified: bool,
    pub budget_exhausted: bool,
    pub judge: Vec<JudgeDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: String,
    pub version: u32,
    pub template_version: String,
    /// State of the run in progress, positioned at the start of its stage.
    pub state: RunState,
    /// Runs that already finished.
    pub completed: Vec<RunState>,
    pub gateway: GatewaySnapshot,
    /// Number of trace events that precede this checkpoint.
    pub trace_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<FinalRecord>,
}

impl Checkpoint {
    pub fn path_in(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.json"))
    }

    /// Writes to a temporary file, then renames it into place.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Checkpoint::path_in(dir, &self.id);
        let tmp = dir.join(format!(".{}.json.tmp", self.id));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Resume(format!("{} is not a valid checkpoint: {e}", path.display())))?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Resume(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                checkpoint.version
            )));
        }
        Ok(checkpoint)
    }
}

/// Checkpoint ids in `dir`, sorted by the trace position they resume at.
pub fn list(dir: &Path) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let cp = Checkpoint::load(&path)?;
            out.push((cp.id, cp.trace_len));
        }
    }
    out.sort_by_key(|(id, len)| (*len, id.clone()));
    Ok(out)
}
