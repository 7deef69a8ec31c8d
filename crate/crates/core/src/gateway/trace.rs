//! Append-only decision trace: one JSON object per line, gapless `seq`.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Call,
    Verdict,
    Result,
    Rejection,
    PlanUpdate,
    Checkpoint,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clock {
    /// Milliseconds since the tracer was created.
    pub mono_ms: u64,
    /// Milliseconds since the Unix epoch.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub session: String,
    pub kind: EventKind,
    pub payload: Value,
    pub clock: Clock,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace sink unavailable: {0}")]
    SinkUnavailable(String),
}

pub trait TraceSink: Send {
    /// Appends one line (no trailing newline) and makes it durable.
    fn append(&mut self, line: &str) -> io::Result<()>;
}

pub struct FileSink {
    file: File,
}

impl FileSink {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }
}

impl TraceSink for FileSink {
    fn append(&mut self, line: &str) -> io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf)?;
        self.file.flush()
    }
}

/// In-memory sink; clones share the same buffer.
#[derive(Clone, Default)]
pub struct MemorySink {
    lines: Arc<Mutex<Vec<String>>>,
}

impl MemorySink {
    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().expect("sink lock").clone()
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.lines()
            .iter()
            .map(|l| serde_json::from_str(l).expect("sink holds valid events"))
            .collect()
    }
}

impl TraceSink for MemorySink {
    fn append(&mut self, line: &str) -> io::Result<()> {
        self.lines.lock().expect("sink lock").push(line.to_string());
        Ok(())
    }
}

struct Inner {
    session: String,
    next_seq: u64,
    sink: Box<dyn TraceSink>,
    broken: Option<String>,
    epoch: Instant,
}

/// Shared handle for appending events to one session's trace.
#[derive(Clone)]
pub struct Tracer {
    inner: Arc<Mutex<Inner>>,
}

impl Tracer {
    pub fn new(session: &str, sink: Box<dyn TraceSink>) -> Self {
        Self::resume(session, sink, 0)
    }

    /// Continues a session whose events `0..next_seq` were already written.
    pub fn resume(session: &str, sink: Box<dyn TraceSink>, next_seq: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                session: session.to_string(),
                next_seq,
                sink,
                broken: None,
                epoch: Instant::now(),
            })),
        }
    }

    pub fn to_file(session: &str, path: &Path) -> io::Result<Self> {
        Ok(Self::new(session, Box::new(FileSink::open(path)?)))
    }

    pub fn session(&self) -> String {
        self.lock().session.clone()
    }

    pub fn next_seq(&self) -> u64 {
        self.lock().next_seq
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Appends an event. After the first sink failure every later append
    /// fails too, so nothing runs unaudited.
    pub fn emit(&self, kind: EventKind, payload: Value) -> Result<u64, TraceError> {
        let mut inner = self.lock();
        if let Some(reason) = &inner.broken {
            return Err(TraceError::SinkUnavailable(reason.clone()));
        }
        let seq = inner.next_seq;
        let event = TraceEvent {
            seq,
            session: inner.session.clone(),
            kind,
            payload,
            clock: Clock {
                mono_ms: inner.epoch.elapsed().as_millis() as u64,
                wall_ms: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0),
            },
        };
        let line = serde_json::to_string(&event).expect("events serialize");
        match inner.sink.append(&line) {
            Ok(()) => {
                inner.next_seq += 1;
                Ok(seq)
            }
            Err(e) => {
                inner.broken = Some(e.to_string());
                Err(TraceError::SinkUnavailable(e.to_string()))
            }
        }
    }
}

/// Keys whose values depend on timing rather than on the episode's logic.
pub const VOLATILE_KEYS: &[&str] = &["clock", "duration_ms", "elapsed_ms", "wall_ms", "mono_ms"];

/// Removes timing-dependent fields, recursively.
pub fn strip_volatile(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in VOLATILE_KEYS {
                m.remove(*k);
            }
            for (_, child) in m.iter_mut() {
                strip_volatile(child);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

pub fn read_events(path: &Path) -> io::Result<Vec<TraceEvent>> {
    let f = File::open(path)?;
    let mut events = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(events)
}

/// Trace lines with timing fields removed, for byte comparison.
pub fn normalized_lines(path: &Path) -> io::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(normalize_lines(text.lines()))
}

pub fn normalize_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    lines
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap_or(Value::String(l.to_string()));
            strip_volatile(&mut v);
            serde_json::to_string(&v).expect("json serializes")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    struct Failing;

    impl TraceSink for Failing {
        fn append(&mut self, _: &str) -> io::Result<()> {
            Err(io::Error::other("disk full"))
        }
    }

    #[test]
    fn sequence_is_gapless() {
        let sink = MemorySink::default();
        let t = Tracer::new("s", Box::new(sink.clone()));
        for i in 0..1000 {
            assert_eq!(t.emit(EventKind::Call, json!({"i": i})).unwrap(), i);
        }
        let seqs: Vec<u64> = sink.events().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn failure_is_sticky() {
        let t = Tracer::new("s", Box::new(Failing));
        assert!(t.emit(EventKind::Call, json!({})).is_err());
        assert!(t.emit(EventKind::Call, json!({})).is_err());
        assert_eq!(t.next_seq(), 0);
    }

    #[test]
    fn strips_timing() {
        let mut v = json!({"seq": 1, "clock": {"mono_ms": 3}, "payload": {"output": {"duration_ms": 12, "stdout": "x"}}});
        strip_volatile(&mut v);
        assert_eq!(v, json!({"seq": 1, "payload": {"output": {"stdout": "x"}}}));
    }

    #[test]
    fn file_sink_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let t = Tracer::to_file("s", &path).unwrap();
        t.emit(EventKind::Call, json!({})).unwrap();
        t.emit(EventKind::Stop, json!({})).unwrap();
        let events = read_events(&path).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].kind, EventKind::Stop);
    }
}
