//! Append-only session log: LLM exchanges, tool calls, actions, frames and
//! decisions, one JSON object per line in `trajectory.jsonl`.
//!
//! Prompts and completions are stored as sha256 digests in the event
//! stream; the full text lives in `llm_*.txt` sidecar files next to it.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::TokenLedger;

pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    LlmCall {
        prompt_digest: String,
        completion_digest: String,
        tokens_in: u64,
        tokens_out: u64,
    },
    ToolUse {
        tool: String,
        args_digest: String,
    },
    Action {
        action: String,
        status: String,
    },
    Screenshot {
        frame: String,
    },
    Decision {
        text: String,
    },
    Phase {
        name: String,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::LlmCall { .. } => "llm_call",
            EventPayload::ToolUse { .. } => "tool_use",
            EventPayload::Action { .. } => "action",
            EventPayload::Screenshot { .. } => "screenshot",
            EventPayload::Decision { .. } => "decision",
            EventPayload::Phase { .. } => "phase",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub seq: u64,
    pub at: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Source of the `at` field. `Logical` timestamps are set by the caller
/// (typically from a virtual target's clock) so that runs are reproducible.
#[derive(Debug, Clone)]
pub enum Clock {
    Logical(u64),
    Monotonic(Instant),
}

impl Clock {
    pub fn logical() -> Self {
        Clock::Logical(0)
    }

    pub fn monotonic() -> Self {
        Clock::Monotonic(Instant::now())
    }

    fn now(&self) -> u64 {
        match self {
            Clock::Logical(t) => *t,
            Clock::Monotonic(start) => start.elapsed().as_millis() as u64,
        }
    }
}

/// When `sync` is set every append is followed by `fsync`; otherwise the
/// line is handed to the OS before `record` returns.
#[derive(Debug)]
pub struct Trajectory {
    dir: PathBuf,
    file: File,
    next_seq: u64,
    last_at: u64,
    clock: Clock,
    sync: bool,
    events: usize,
}

impl Trajectory {
    /// Creates `dir` if needed and starts a fresh `trajectory.jsonl` in it.
    pub fn create(dir: impl Into<PathBuf>, clock: Clock) -> Result<Self, TrajectoryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(dir.join(TRAJECTORY_FILE))?;
        Ok(Self {
            dir,
            file,
            next_seq: 1,
            last_at: 0,
            clock,
            sync: true,
            events: 0,
        })
    }

    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(TRAJECTORY_FILE)
    }

    pub fn len(&self) -> usize {
        self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events == 0
    }

    /// Advances a logical clock; ignored for a monotonic one.
    pub fn set_time(&mut self, at_ms: u64) {
        if let Clock::Logical(t) = &mut self.clock {
            *t = (*t).max(at_ms);
        }
    }

    pub fn record(&mut self, payload: EventPayload) -> Result<TrajectoryEvent, TrajectoryError> {
        let at = self.clock.now().max(self.last_at);
        self.append(TrajectoryEvent {
            seq: self.next_seq,
            at,
            payload,
        })
    }

    /// Appends an event with a caller-chosen timestamp; `seq` is reassigned.
    pub fn record_event(&mut self, event: &TrajectoryEvent) -> Result<TrajectoryEvent, TrajectoryError> {
        let at = event.at.max(self.last_at);
        self.append(TrajectoryEvent {
            seq: self.next_seq,
            at,
            payload: event.payload.clone(),
        })
    }

    fn append(&mut self, event: TrajectoryEvent) -> Result<TrajectoryEvent, TrajectoryError> {
        let mut line = serde_json::to_vec(&event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.sync {
            self.file.sync_data()?;
        }
        self.next_seq += 1;
        self.last_at = event.at;
        self.events += 1;
        Ok(event)
    }

    /// Writes prompt and completion sidecars and records the digests.
    pub fn record_llm(
        &mut self,
        prompt: &str,
        completion: &str,
        tokens_in: u64,
        tokens_out: u64,
    ) -> Result<TrajectoryEvent, TrajectoryError> {
        let seq = self.next_seq;
        fs::write(self.dir.join(format!("llm_{seq:06}_prompt.txt")), prompt)?;
        fs::write(self.dir.join(format!("llm_{seq:06}_completion.txt")), completion)?;
        self.record(EventPayload::LlmCall {
            prompt_digest: sha256_hex(prompt.as_bytes()),
            completion_digest: sha256_hex(completion.as_bytes()),
            tokens_in,
            tokens_out,
        })
    }

    pub fn record_tool(&mut self, tool: &str, args: &str) -> Result<TrajectoryEvent, TrajectoryError> {
        self.record(EventPayload::ToolUse {
            tool: tool.to_string(),
            args_digest: sha256_hex(args.as_bytes()),
        })
    }

    pub fn decision(&mut self, text: impl Into<String>) -> Result<TrajectoryEvent, TrajectoryError> {
        self.record(EventPayload::Decision { text: text.into() })
    }

    pub fn phase(&mut self, name: impl Into<String>) -> Result<TrajectoryEvent, TrajectoryError> {
        self.record(EventPayload::Phase { name: name.into() })
    }
}

/// Reads a trajectory file. A trailing newline is allowed; any other empty
/// or malformed line is an error carrying its 1-based line number.
pub fn load(path: &Path) -> Result<Vec<TrajectoryEvent>, TrajectoryError> {
    let text = fs::read_to_string(path)?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Vec<TrajectoryEvent>, TrajectoryError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    let mut events = Vec::new();
    for (i, line) in body.split('\n').enumerate() {
        let event: TrajectoryEvent = serde_json::from_str(line).map_err(|e| TrajectoryError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

/// Sum of (tokens_in, tokens_out) over all `llm_call` events.
pub fn token_totals(events: &[TrajectoryEvent]) -> (u64, u64) {
    events.iter().fold((0, 0), |(i, o), e| match &e.payload {
        EventPayload::LlmCall {
            tokens_in,
            tokens_out,
            ..
        } => (i + tokens_in, o + tokens_out),
        _ => (i, o),
    })
}

/// Rebuilds a token ledger from the `llm_call` events, one call per event.
pub fn ledger_from_events(events: &[TrajectoryEvent], problems: usize) -> TokenLedger {
    let mut ledger = TokenLedger::new(problems);
    for e in events {
        if let EventPayload::LlmCall {
            tokens_in,
            tokens_out,
            ..
        } = &e.payload
        {
            ledger.record(format!("seq{}", e.seq), *tokens_in, *tokens_out);
        }
    }
    ledger
}
