//! Append-only run trace, written as JSONL.
//!
//! The first line of a trace file is a [`TraceHeader`]; every following
//! line is one [`TraceEvent`]. Timestamps and latencies are informational
//! and ignored by [`first_divergence`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub template_version: String,
    /// Free-form description of how the run was set up (config, problem,
    /// backend); enough for `replay` to re-create it.
    pub setup: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStart,
    PhaseStart,
    ModelCall,
    Draft,
    Censor,
    Redraft,
    Grade,
    Refine,
    Regrade,
    BranchDone,
    BranchFailed,
    Verify,
    Extraction,
    ExtractionFailed,
    Truncated,
    Lint,
    PairResolved,
    PairFailed,
    LemmaAdded,
    PostEnhance,
    Checkpoint,
    Judge,
    BudgetExhausted,
    StageFailed,
    RunEnd,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub ts_ms: u64,
    pub run: Option<u32>,
    /// 1-4 inside a run, 0 for events outside any phase.
    pub phase: u8,
    pub kind: EventKind,
    pub lane: String,
    pub budget_remaining: u64,
    /// Digest of the canonical payload.
    pub digest: String,
    pub payload: Value,
}

impl TraceEvent {
    /// The event with wall-clock fields cleared, for comparisons.
    pub fn normalized(&self) -> TraceEvent {
        let mut e = self.clone();
        e.ts_ms = 0;
        if let Some(obj) = e.payload.as_object_mut() {
            obj.remove("latency_ms");
        }
        e.digest = crate::types::digest(&e.payload.to_string());
        e
    }
}

struct Inner {
    events: Vec<TraceEvent>,
    writer: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

/// Shared event sink. Appends are serialized; `seq` is assigned on append.
pub struct Trace {
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trace").field("len", &self.len()).finish()
    }
}

impl Default for Trace {
    fn default() -> Self {
        Trace::in_memory()
    }
}

impl Trace {
    pub fn in_memory() -> Self {
        Trace::from_events(Vec::new())
    }

    pub fn from_events(events: Vec<TraceEvent>) -> Self {
        Trace {
            inner: Mutex::new(Inner {
                events,
                writer: None,
                path: None,
            }),
        }
    }

    /// Creates `path`, writes the header and the given prior events, and
    /// streams every later event to it.
    pub fn to_file(path: &Path, header: &TraceHeader, prior: Vec<TraceEvent>) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        write_line(&mut writer, header).map_err(|e| Error::io(path, e))?;
        for event in &prior {
            write_line(&mut writer, event).map_err(|e| Error::io(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(Trace {
            inner: Mutex::new(Inner {
                events: prior,
                writer: Some(writer),
                path: Some(path.to_path_buf()),
            }),
        })
    }

    /// Appends an event. `remaining` is evaluated under the trace lock so
    /// budget readings are ordered consistently with `seq`.
    pub fn record(
        &self,
        run: Option<u32>,
        phase: u8,
        kind: EventKind,
        lane: &str,
        remaining: impl FnOnce() -> u64,
        payload: Value,
    ) {
        let mut inner = self.lock();
        let event = TraceEvent {
            seq: inner.events.len() as u64,
            ts_ms: now_ms(),
            run,
            phase,
            kind,
            lane: lane.to_string(),
            budget_remaining: remaining(),
            digest: crate::types::digest(&payload.to_string()),
            payload,
        };
        if let Some(writer) = inner.writer.as_mut() {
            if write_line(writer, &event).and_then(|_| writer.flush()).is_err() {
                inner.writer = None;
            }
        }
        inner.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.lock().events.clone()
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.lock().path.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Reads a trace file written by [`Trace::to_file`].
pub fn read_trace(path: &Path) -> Result<(TraceHeader, Vec<TraceEvent>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: TraceHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Invalid(format!("{} line 1: bad trace header: {e}", path.display())))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Invalid(format!(
            "trace schema version {} is not supported (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TraceEvent = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{} line {}: {e}", path.display(), i + 2)))?;
        events.push(event);
    }
    Ok((header, events))
}

/// Index of the first event that differs once wall-clock fields are
/// ignored, or `None` if the traces are identical.
pub fn first_divergence(a: &[TraceEvent], b: &[TraceEvent]) -> Option<usize> {
    let n = a.len().min(b.len());
    (0..n)
        .find(|&i| a[i].normalized() != b[i].normalized())
        .or(if a.len() == b.len() { None } else { Some(n) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample(trace: &Trace) {
        trace.record(Some(0), 1, EventKind::PhaseStart, "r0/p1.i1", || 90, json!({"iteration": 1}));
        trace.record(Some(0), 1, EventKind::ModelCall, "r0/p1.i1/b0/draft", || 80, json!({"latency_ms": 4}));
    }

    #[test]
    fn events_are_sequenced() {
        let t = Trace::in_memory();
        sample(&t);
        let ev = t.events();
        assert_eq!(ev.iter().map(|e| e.seq).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(ev[1].budget_remaining, 80);
    }

    #[test]
    fn file_round_trip_and_comparison() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let header = TraceHeader {
            schema_version: SCHEMA_VERSION,
            template_version: "v".into(),
            setup: json!({}),
        };
        let t = Trace::to_file(&path, &header, vec![]).unwrap();
        sample(&t);
        let (h, events) = read_trace(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(events, t.events());

        let mut other = events.clone();
        other[1].ts_ms += 100;
        other[1].payload = json!({"latency_ms": 99});
        assert_eq!(first_divergence(&events, &other), None);
        other[0].payload = json!({"iteration": 2});
        assert_eq!(first_divergence(&events, &other), Some(0));
        assert_eq!(first_divergence(&events, &events[..1]), Some(1));
    }

    #[test]
    fn newer_schema_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(&path, "{\"schema_version\":99,\"template_version\":\"v\",\"setup\":{}}\n").unwrap();
        let err = read_trace(&path).unwrap_err();
        assert!(err.to_string().contains("schema version 99"));
    }
}
