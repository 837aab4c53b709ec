//! Executes validated actions against a target and keeps the session history.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{validate_action, ActionCommand, Direction, Key, ScreenBounds};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("backend error: {0}")]
pub struct BackendError(pub String);

/// Cross-thread stop signal; polled before every command and during waits.
#[derive(Debug, Clone, Default)]
pub struct AbortFlag(Arc<AtomicBool>);

impl AbortFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn clear(&self) {
        self.0.store(false, Ordering::SeqCst);
    }

    pub fn is_raised(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Input actuation surface shared by native, process and virtual targets.
pub trait ExecutorBackend {
    fn bounds(&self) -> ScreenBounds;
    fn click(&mut self, x: i64, y: i64) -> Result<(), BackendError>;
    fn type_text(&mut self, text: &str) -> Result<(), BackendError>;
    fn key_chord(&mut self, keys: &[Key]) -> Result<(), BackendError>;
    fn press(&mut self, key: &Key) -> Result<(), BackendError>;
    fn scroll(&mut self, x: i64, y: i64, direction: Direction) -> Result<(), BackendError>;
    /// Lets `seconds` of application time pass. Returns `false` if `abort`
    /// was raised before the full duration elapsed.
    fn idle(&mut self, seconds: f64, abort: &AbortFlag) -> Result<bool, BackendError>;
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Ok,
    Aborted,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResult {
    pub command: ActionCommand,
    pub started_at_ms: u64,
    pub ended_at_ms: u64,
    pub status: ActionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Default)]
pub struct Executor {
    history: Vec<ActionResult>,
    abort: AbortFlag,
}

impl Executor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_abort(abort: AbortFlag) -> Self {
        Self {
            history: Vec::new(),
            abort,
        }
    }

    pub fn abort_flag(&self) -> AbortFlag {
        self.abort.clone()
    }

    pub fn history(&self) -> &[ActionResult] {
        &self.history
    }

    /// Runs one command and appends its result to the history.
    pub fn execute(&mut self, cmd: &ActionCommand, backend: &mut dyn ExecutorBackend) -> ActionResult {
        let started_at_ms = backend.now_ms();
        let (status, note) = if self.abort.is_raised() {
            (ActionStatus::Aborted, Some("abort flag raised before execution".to_string()))
        } else if let Err(e) = validate_action(cmd, backend.bounds()) {
            (ActionStatus::BackendError, Some(format!("rejected: {e}")))
        } else {
            match actuate(cmd, backend, &self.abort) {
                Ok(true) => (ActionStatus::Ok, None),
                Ok(false) => (ActionStatus::Aborted, Some("aborted during wait".to_string())),
                Err(e) => (ActionStatus::BackendError, Some(e.0)),
            }
        };
        let result = ActionResult {
            command: cmd.clone(),
            started_at_ms,
            ended_at_ms: backend.now_ms().max(started_at_ms),
            status,
            note,
        };
        self.history.push(result.clone());
        result
    }
}

fn actuate(
    cmd: &ActionCommand,
    backend: &mut dyn ExecutorBackend,
    abort: &AbortFlag,
) -> Result<bool, BackendError> {
    match cmd {
        ActionCommand::Click { x, y } => backend.click(*x, *y)?,
        ActionCommand::Type { text } => backend.type_text(text)?,
        ActionCommand::Hotkey { keys } => backend.key_chord(keys)?,
        ActionCommand::Press { key } => backend.press(key)?,
        ActionCommand::Scroll { x, y, direction } => backend.scroll(*x, *y, *direction)?,
        ActionCommand::Wait { seconds } => return backend.idle(*seconds, abort),
        ActionCommand::Finish { .. } => {}
    }
    Ok(true)
}
