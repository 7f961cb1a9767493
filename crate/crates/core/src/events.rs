//! Append-only, per-session event log with replay and live subscription.
//!
//! On disk each session stream is `sessions/<id>.jsonl`, one [`Event`] per
//! line in canonical field order, plus `index.jsonl` listing stream ids in
//! creation order. Snapshots of the template library and tool registry are
//! written under `snapshots/` when a session reaches a terminal state.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hash::{canonical_hash, sha256_hex};
use crate::session::{FoldError, Session, SessionEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub global_seq: u64,
    pub session_id: String,
    pub kind: String,
    pub payload: Value,
    pub wall_time: DateTime<Utc>,
    /// Duration of the work the event reports (sandbox run, model call).
    /// Timing metadata like `wall_time`; excluded from fingerprints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

#[derive(Serialize)]
struct TimelessEvent<'a> {
    global_seq: u64,
    session_id: &'a str,
    kind: &'a str,
    payload: &'a Value,
}

impl Event {
    pub fn session_event(&self) -> Result<SessionEvent, serde_json::Error> {
        SessionEvent::from_parts(&self.kind, &self.payload)
    }
}

/// Hash of a log with timestamps and durations removed.
pub fn log_fingerprint(events: &[Event]) -> String {
    let timeless: Vec<TimelessEvent> = events
        .iter()
        .map(|e| TimelessEvent { global_seq: e.global_seq, session_id: &e.session_id, kind: &e.kind, payload: &e.payload })
        .collect();
    canonical_hash(&timeless)
}

#[derive(Debug, Error)]
pub enum EventStoreError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session stream {0} already exists")]
    StreamExists(String),
    #[error("session stream {0} is closed")]
    Closed(String),
    #[error("event store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record at seq {seq} of {session}: {message}")]
    Corrupt { session: String, seq: u64, message: String },
    #[error("replay failed: {0}")]
    Fold(#[from] FoldError),
}

/// Where a stored log stopped being readable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruncationReport {
    pub line: usize,
    pub last_good_seq: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LogRead {
    pub events: Vec<Event>,
    pub truncated: Option<TruncationReport>,
}

#[derive(Debug)]
pub struct Replayed {
    pub session: Session,
    pub truncated: Option<TruncationReport>,
}

#[derive(Debug, Default)]
struct Stream {
    events: Vec<Event>,
    lines: Vec<String>,
    closed: bool,
    file: Option<File>,
}

#[derive(Debug, Default)]
struct Inner {
    streams: HashMap<String, Stream>,
    order: Vec<String>,
}

/// Single writer per stream, any number of readers and subscribers.
#[derive(Debug)]
pub struct EventStore {
    dir: Option<PathBuf>,
    inner: Mutex<Inner>,
    changed: Condvar,
}

impl EventStore {
    pub fn in_memory() -> Self {
        Self { dir: None, inner: Mutex::new(Inner::default()), changed: Condvar::new() }
    }

    /// Opens (or creates) a directory-backed store and loads existing streams.
    /// Loaded streams are closed; a truncated stream keeps its readable prefix.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EventStoreError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("sessions"))?;
        fs::create_dir_all(dir.join("snapshots"))?;
        let mut inner = Inner::default();
        let index = dir.join("index.jsonl");
        if index.exists() {
            for line in BufReader::new(File::open(&index)?).lines() {
                let line = line?;
                let id: String = match serde_json::from_str::<Value>(&line) {
                    Ok(v) => v.get("session_id").and_then(Value::as_str).unwrap_or_default().to_string(),
                    Err(_) => continue,
                };
                if id.is_empty() || inner.streams.contains_key(&id) {
                    continue;
                }
                let read = read_log(&dir.join("sessions").join(format!("{id}.jsonl")))?;
                let lines = read.events.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
                inner.streams.insert(id.clone(), Stream { events: read.events, lines, closed: true, file: None });
                inner.order.push(id);
            }
        }
        Ok(Self { dir: Some(dir), inner: Mutex::new(inner), changed: Condvar::new() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.inner.lock().unwrap().order.clone()
    }

    pub fn stream_count(&self) -> usize {
        self.inner.lock().unwrap().order.len()
    }

    /// Reserves the next sequential id (`sess-000001`, ...) and opens its stream.
    pub fn open_next_stream(&self, prefix: &str) -> Result<String, EventStoreError> {
        let mut inner = self.inner.lock().unwrap();
        let mut n = inner.order.len() + 1;
        let id = loop {
            let candidate = format!("{prefix}-{n:06}");
            if !inner.streams.contains_key(&candidate) {
                break candidate;
            }
            n += 1;
        };
        self.open_locked(&mut inner, &id)?;
        Ok(id)
    }

    pub fn open_stream(&self, session_id: &str) -> Result<(), EventStoreError> {
        let mut inner = self.inner.lock().unwrap();
        self.open_locked(&mut inner, session_id)
    }

    fn open_locked(&self, inner: &mut Inner, id: &str) -> Result<(), EventStoreError> {
        if inner.streams.contains_key(id) {
            return Err(EventStoreError::StreamExists(id.to_string()));
        }
        let mut stream = Stream::default();
        if let Some(dir) = &self.dir {
            stream.file =
                Some(OpenOptions::new().create(true).append(true).open(dir.join("sessions").join(format!("{id}.jsonl")))?);
            let mut index = OpenOptions::new().create(true).append(true).open(dir.join("index.jsonl"))?;
            writeln!(index, "{}", serde_json::json!({"session_id": id}))?;
            index.sync_data()?;
        }
        inner.streams.insert(id.to_string(), stream);
        inner.order.push(id.to_string());
        Ok(())
    }

    /// Appends and flushes one event; returns its seq (previous + 1).
    pub fn append(&self, session_id: &str, kind: &str, payload: Value, elapsed_ms: Option<u64>) -> Result<u64, EventStoreError> {
        let mut inner = self.inner.lock().unwrap();
        let stream = inner.streams.get_mut(session_id).ok_or_else(|| EventStoreError::UnknownSession(session_id.to_string()))?;
        if stream.closed {
            return Err(EventStoreError::Closed(session_id.to_string()));
        }
        let seq = stream.events.len() as u64 + 1;
        let event = Event {
            global_seq: seq,
            session_id: session_id.to_string(),
            kind: kind.to_string(),
            payload,
            wall_time: Utc::now(),
            elapsed_ms,
        };
        let line = serde_json::to_string(&event).expect("events serialize");
        if let Some(file) = stream.file.as_mut() {
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.sync_data()?;
        }
        stream.events.push(event);
        stream.lines.push(line);
        drop(inner);
        self.changed.notify_all();
        Ok(seq)
    }

    pub fn append_session_event(
        &self,
        session_id: &str,
        event: &SessionEvent,
        elapsed_ms: Option<u64>,
    ) -> Result<u64, EventStoreError> {
        let (kind, payload) = event.to_parts();
        self.append(session_id, &kind, payload, elapsed_ms)
    }

    pub fn close(&self, session_id: &str) -> Result<(), EventStoreError> {
        let mut inner = self.inner.lock().unwrap();
        let stream = inner.streams.get_mut(session_id).ok_or_else(|| EventStoreError::UnknownSession(session_id.to_string()))?;
        stream.closed = true;
        stream.file = None;
        drop(inner);
        self.changed.notify_all();
        Ok(())
    }

    pub fn is_closed(&self, session_id: &str) -> Option<bool> {
        self.inner.lock().unwrap().streams.get(session_id).map(|s| s.closed)
    }

    pub fn events(&self, session_id: &str) -> Result<Vec<Event>, EventStoreError> {
        self.events_from(session_id, 1)
    }

    pub fn events_from(&self, session_id: &str, from_seq: u64) -> Result<Vec<Event>, EventStoreError> {
        let inner = self.inner.lock().unwrap();
        let stream = inner.streams.get(session_id).ok_or_else(|| EventStoreError::UnknownSession(session_id.to_string()))?;
        let start = from_seq.saturating_sub(1) as usize;
        Ok(stream.events.get(start..).map(<[Event]>::to_vec).unwrap_or_default())
    }

    /// SHA-256 of the stored record bytes for `seq`.
    pub fn record_hash(&self, session_id: &str, seq: u64) -> Option<String> {
        let inner = self.inner.lock().unwrap();
        let line = inner.streams.get(session_id)?.lines.get(seq.checked_sub(1)? as usize)?;
        Some(sha256_hex(line.as_bytes()))
    }

    /// Rebuild the session by folding its stored events.
    pub fn replay(&self, session_id: &str) -> Result<Replayed, EventStoreError> {
        let events = self.events(session_id)?;
        if events.is_empty() {
            return Err(EventStoreError::UnknownSession(session_id.to_string()));
        }
        let replayed = replay_events(session_id, &events)?;
        Ok(Replayed { session: replayed, truncated: None })
    }

    pub fn subscribe(self: &Arc<Self>, session_id: &str, from_seq: u64) -> Subscription {
        Subscription { store: Arc::clone(self), session_id: session_id.to_string(), next_seq: from_seq.max(1) }
    }

    /// Writes `lines` to `snapshots/<session>-<label>.jsonl`.
    pub fn write_snapshot(&self, session_id: &str, label: &str, lines: &[String]) -> Result<Option<PathBuf>, EventStoreError> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join("snapshots").join(format!("{session_id}-{label}.jsonl"));
        let mut f = File::create(&path)?;
        for l in lines {
            writeln!(f, "{l}")?;
        }
        f.sync_data()?;
        Ok(Some(path))
    }
}

/// Fold already-decoded events into a session.
pub fn replay_events(session_id: &str, events: &[Event]) -> Result<Session, EventStoreError> {
    let decoded: Vec<(u64, SessionEvent)> = events
        .iter()
        .map(|e| {
            e.session_event().map(|se| (e.global_seq, se)).map_err(|err| EventStoreError::Corrupt {
                session: session_id.to_string(),
                seq: e.global_seq,
                message: err.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(Session::fold(session_id, decoded.iter().map(|(s, e)| (*s, e)))?)
}

/// Reads a session log file, stopping at the first unreadable or out-of-order line.
pub fn read_log(path: &Path) -> Result<LogRead, EventStoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events: Vec<Event> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let expected = events.len() as u64 + 1;
        let problem = match serde_json::from_str::<Event>(&line) {
            Ok(e) if e.global_seq == expected => {
                events.push(e);
                continue;
            }
            Ok(e) => format!("expected seq {expected}, found {}", e.global_seq),
            Err(e) => e.to_string(),
        };
        return Ok(LogRead {
            truncated: Some(TruncationReport { line: i + 1, last_good_seq: events.len() as u64, reason: problem }),
            events,
        });
    }
    Ok(LogRead { events, truncated: None })
}

/// Replays a log file directly, tolerating a truncated tail.
pub fn replay_file(path: &Path) -> Result<Replayed, EventStoreError> {
    let read = read_log(path)?;
    let id = read
        .events
        .first()
        .map(|e| e.session_id.clone())
        .ok_or_else(|| EventStoreError::UnknownSession(path.display().to_string()))?;
    let session = replay_events(&id, &read.events)?;
    Ok(Replayed { session, truncated: read.truncated })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    Event(Event),
    /// The stream is closed and every event has been delivered.
    End,
    /// Nothing new within the wait window.
    Idle,
}

/// Ordered feed of events from `from_seq`: catch-up first, then live.
#[derive(Debug)]
pub struct Subscription {
    store: Arc<EventStore>,
    session_id: String,
    next_seq: u64,
}

impl Subscription {
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn next_timeout(&mut self, wait: Duration) -> Delivery {
        let deadline = Instant::now() + wait;
        let mut inner = self.store.inner.lock().unwrap();
        loop {
            if let Some(stream) = inner.streams.get(&self.session_id) {
                if let Some(e) = stream.events.get(self.next_seq as usize - 1) {
                    self.next_seq += 1;
                    return Delivery::Event(e.clone());
                }
                if stream.closed {
                    return Delivery::End;
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Delivery::Idle;
            }
            inner = self.store.changed.wait_timeout(inner, deadline - now).unwrap().0;
        }
    }
}

impl Iterator for Subscription {
    type Item = Event;

    /// Blocks until the next event; ends when the stream is closed and drained.
    fn next(&mut self) -> Option<Event> {
        loop {
            match self.next_timeout(Duration::from_millis(250)) {
                Delivery::Event(e) => return Some(e),
                Delivery::End => return None,
                Delivery::Idle => {}
            }
        }
    }
}
