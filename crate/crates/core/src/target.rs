//! Targets a test session can drive: in-process virtual games, or any child
//! process speaking the line protocol below.
//!
//! Protocol (child side is [`serve`]):
//! - on start the child writes `frame_000000.png` into the handshake
//!   directory and prints `READY <width> <height> <frame>`;
//! - each stdin line is an action in the DSL, `probe`, or `quit`;
//! - an applied action answers `FRAME <file> <clock_ms> <logs>` where
//!   `<logs>` is the number of `PLAYLOG` lines written to stderr so far;
//! - `probe` answers `PROBE <json>`; a bad line answers `ERR <message>`.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_action, render_action, ActionCommand, Direction, Key, ScreenBounds};
use crate::executor::{AbortFlag, BackendError, ExecutorBackend};
use crate::observer::{frame_file_name, Frame, ObserverBackend, ObserverError};
use crate::sandbox::{self, LogLine, ProcessHandle, SandboxConfig};
use crate::virtual_target::{StateProbe, TargetVariant, VirtualTarget};

pub const HANDSHAKE_VAR: &str = "PLAY_HANDSHAKE_DIR";
const RESPONSE_TIMEOUT: Duration = Duration::from_secs(20);
const VARIANT_CMD_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("launch spec must set exactly one of `virtual`, `variant_cmd`, `command`")]
    AmbiguousSpec,
    #[error("variant command failed: {0}")]
    VariantCommand(String),
    #[error("target process failed to start: {0}")]
    Process(String),
    #[error(transparent)]
    Sandbox(#[from] sandbox::SandboxError),
}

/// How a session obtains its target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchSpec {
    /// A virtual target id such as `flappy_ok`.
    #[serde(default, rename = "virtual", skip_serializing_if = "Option::is_none")]
    pub virtual_id: Option<String>,
    /// A command run in the working copy whose last stdout line names the
    /// virtual target variant to play.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_cmd: Option<String>,
    /// A child process speaking the frame protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

impl LaunchSpec {
    pub fn virtual_target(variant: TargetVariant) -> Self {
        Self {
            virtual_id: Some(variant.id().to_string()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LaunchError> {
        let set = [&self.virtual_id, &self.variant_cmd, &self.command]
            .iter()
            .filter(|v| v.is_some())
            .count();
        if set != 1 {
            return Err(LaunchError::AmbiguousSpec);
        }
        if let Some(id) = &self.virtual_id {
            id.parse::<TargetVariant>()
                .map_err(|e| LaunchError::VariantCommand(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetExit {
    pub code: Option<i32>,
    pub signal: Option<i32>,
}

impl TargetExit {
    pub fn is_crash(&self) -> bool {
        self.code != Some(0)
    }
}

/// Everything a test session needs from its target.
pub trait GuiTarget: ObserverBackend + ExecutorBackend {
    fn label(&self) -> String;
    /// Oracle snapshot of internal state, if the target offers one.
    fn probe(&mut self) -> Option<StateProbe>;
    /// Standardized log lines emitted since the previous call.
    fn drain_logs(&mut self) -> Vec<LogLine>;
    /// Exit information once the target has stopped.
    fn exit_status(&mut self) -> Option<TargetExit>;
}

impl GuiTarget for VirtualTarget {
    fn label(&self) -> String {
        self.variant().id().to_string()
    }

    fn probe(&mut self) -> Option<StateProbe> {
        Some(VirtualTarget::probe(self))
    }

    fn drain_logs(&mut self) -> Vec<LogLine> {
        VirtualTarget::drain_logs(self)
    }

    fn exit_status(&mut self) -> Option<TargetExit> {
        None
    }
}

// ---------------------------------------------------------------------------
// Child side

/// Runs a virtual target as a protocol server until `quit` or end of input.
pub fn serve<R: BufRead, W: Write, E: Write>(
    variant: TargetVariant,
    seed: u64,
    dir: &Path,
    input: R,
    mut out: W,
    mut err: E,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut target = VirtualTarget::new(variant, seed);
    let abort = AbortFlag::new();
    let mut frames = 0u64;
    let mut logs = 0usize;
    let flush_logs = |target: &mut VirtualTarget, err: &mut E| -> io::Result<usize> {
        let lines = target.drain_logs();
        for line in &lines {
            writeln!(err, "{line}")?;
        }
        err.flush()?;
        Ok(lines.len())
    };
    let write_frame = |target: &VirtualTarget, n: u64| -> io::Result<String> {
        let name = frame_file_name(n);
        let tmp = dir.join(format!(".{name}.tmp"));
        target
            .render()
            .save_png(&tmp)
            .map_err(|e| io::Error::other(e.to_string()))?;
        fs::rename(&tmp, dir.join(&name))?;
        Ok(name)
    };

    logs += flush_logs(&mut target, &mut err)?;
    let first = write_frame(&target, frames)?;
    let (w, h) = variant.canvas();
    writeln!(out, "READY {w} {h} {first}")?;
    out.flush()?;

    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "quit" => break,
            "probe" => {
                let json = serde_json::to_string(&target.probe()).map_err(io::Error::other)?;
                writeln!(out, "PROBE {json}")?;
            }
            _ => match parse_action(line) {
                Err(e) => writeln!(out, "ERR {e}")?,
                Ok(cmd) => {
                    let result = apply(&mut target, &cmd, &abort);
                    logs += flush_logs(&mut target, &mut err)?;
                    match result {
                        Err(e) => writeln!(out, "ERR {e}")?,
                        Ok(()) => {
                            frames += 1;
                            let name = write_frame(&target, frames)?;
                            writeln!(out, "FRAME {name} {} {logs}", target_clock(&target))?;
                        }
                    }
                }
            },
        }
        out.flush()?;
    }
    Ok(())
}

fn target_clock(t: &VirtualTarget) -> u64 {
    ObserverBackend::now_ms(t)
}

fn apply(target: &mut VirtualTarget, cmd: &ActionCommand, abort: &AbortFlag) -> Result<(), BackendError> {
    crate::action::validate_action(cmd, target.bounds()).map_err(|e| BackendError(e.to_string()))?;
    match cmd {
        ActionCommand::Click { x, y } => target.click(*x, *y),
        ActionCommand::Type { text } => target.type_text(text),
        ActionCommand::Hotkey { keys } => target.key_chord(keys),
        ActionCommand::Press { key } => target.press(key),
        ActionCommand::Scroll { x, y, direction } => target.scroll(*x, *y, *direction),
        ActionCommand::Wait { seconds } => target.idle(*seconds, abort).map(|_| ()),
        ActionCommand::Finish { .. } => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Parent side

/// A protocol-speaking child process run under the sandbox.
pub struct ProcessTarget {
    handle: Option<ProcessHandle>,
    label: String,
    dir: PathBuf,
    bounds: ScreenBounds,
    frame: String,
    clock_ms: u64,
    logs_seen: usize,
    exit: Option<TargetExit>,
}

impl std::fmt::Debug for ProcessTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessTarget")
            .field("label", &self.label)
            .field("frame", &self.frame)
            .finish()
    }
}

impl ProcessTarget {
    /// Launches `command` in `workdir`; frames go to `capture_dir/frames`.
    pub fn launch(command: &str, workdir: &Path, seed: u64, capture_dir: &Path) -> Result<Self, LaunchError> {
        let dir = capture_dir.join("frames");
        fs::create_dir_all(&dir).map_err(sandbox::SandboxError::Io)?;
        let config = SandboxConfig::new(workdir, command, capture_dir)
            .seed(seed)
            .interactive(true)
            .timeout(Duration::from_secs(3600))
            .env(HANDSHAKE_VAR, dir.display().to_string());
        let handle = sandbox::launch(&config)?;
        let mut target = Self {
            handle: Some(handle),
            label: command.to_string(),
            dir,
            bounds: ScreenBounds { width: 1, height: 1 },
            frame: String::new(),
            clock_ms: 0,
            logs_seen: 0,
            exit: None,
        };
        let ready = target
            .read_response()
            .map_err(|e| LaunchError::Process(e.0))?;
        let parts: Vec<&str> = ready.split_whitespace().collect();
        match parts.as_slice() {
            ["READY", w, h, frame] => {
                let w = w.parse().map_err(|_| LaunchError::Process(format!("bad READY line `{ready}`")))?;
                let h = h.parse().map_err(|_| LaunchError::Process(format!("bad READY line `{ready}`")))?;
                target.bounds = ScreenBounds::new(w, h)
                    .ok_or_else(|| LaunchError::Process(format!("bad READY line `{ready}`")))?;
                target.frame = frame.to_string();
            }
            _ => return Err(LaunchError::Process(format!("expected READY, got `{ready}`"))),
        }
        Ok(target)
    }

    fn handle(&mut self) -> Result<&mut ProcessHandle, BackendError> {
        self.handle
            .as_mut()
            .ok_or_else(|| BackendError("target process already stopped".into()))
    }

    fn read_response(&mut self) -> Result<String, BackendError> {
        let handle = self.handle()?;
        handle
            .recv_line(RESPONSE_TIMEOUT)
            .ok_or_else(|| BackendError("target process did not answer".into()))
    }

    fn send(&mut self, line: &str) -> Result<String, BackendError> {
        let handle = self.handle()?;
        let stdin = handle
            .stdin()
            .ok_or_else(|| BackendError("target stdin closed".into()))?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| BackendError(format!("target stdin: {e}")))?;
        self.read_response()
    }

    fn act(&mut self, cmd: &ActionCommand) -> Result<(), BackendError> {
        let reply = self.send(&render_action(cmd))?;
        let parts: Vec<&str> = reply.split_whitespace().collect();
        match parts.as_slice() {
            ["FRAME", name, clock, logs] => {
                self.frame = name.to_string();
                self.clock_ms = clock.parse().unwrap_or(self.clock_ms);
                let expected: usize = logs.parse().unwrap_or(0);
                self.await_logs(expected);
                Ok(())
            }
            ["ERR", ..] => Err(BackendError(reply["ERR".len()..].trim().to_string())),
            _ => Err(BackendError(format!("unexpected reply `{reply}`"))),
        }
    }

    /// Waits until the stderr reader has caught up with the child's count.
    fn await_logs(&mut self, expected: usize) {
        let deadline = Instant::now() + RESPONSE_TIMEOUT;
        while let Some(h) = self.handle.as_ref() {
            if h.logs().len() >= expected || Instant::now() > deadline {
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    pub fn shutdown(&mut self) -> Option<sandbox::RunRecord> {
        let mut handle = self.handle.take()?;
        if let Some(stdin) = handle.stdin() {
            let _ = writeln!(stdin, "quit");
        }
        Some(sandbox::wait_or_kill(handle, Duration::from_secs(2)))
    }
}

impl Drop for ProcessTarget {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl ObserverBackend for ProcessTarget {
    fn screen_size(&self) -> (u32, u32) {
        (self.bounds.width, self.bounds.height)
    }

    fn grab(&mut self) -> Result<Frame, ObserverError> {
        Frame::load_png(&self.dir.join(&self.frame))
    }

    fn now_ms(&self) -> u64 {
        self.clock_ms
    }
}

impl ExecutorBackend for ProcessTarget {
    fn bounds(&self) -> ScreenBounds {
        self.bounds
    }

    fn click(&mut self, x: i64, y: i64) -> Result<(), BackendError> {
        self.act(&ActionCommand::Click { x, y })
    }

    fn type_text(&mut self, text: &str) -> Result<(), BackendError> {
        self.act(&ActionCommand::Type { text: text.to_string() })
    }

    fn key_chord(&mut self, keys: &[Key]) -> Result<(), BackendError> {
        self.act(&ActionCommand::Hotkey { keys: keys.to_vec() })
    }

    fn press(&mut self, key: &Key) -> Result<(), BackendError> {
        self.act(&ActionCommand::Press { key: key.clone() })
    }

    fn scroll(&mut self, x: i64, y: i64, direction: Direction) -> Result<(), BackendError> {
        self.act(&ActionCommand::Scroll { x, y, direction })
    }

    fn idle(&mut self, seconds: f64, abort: &AbortFlag) -> Result<bool, BackendError> {
        if abort.is_raised() {
            return Ok(false);
        }
        self.act(&ActionCommand::Wait { seconds })?;
        Ok(true)
    }

    fn now_ms(&self) -> u64 {
        self.clock_ms
    }
}

impl GuiTarget for ProcessTarget {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn probe(&mut self) -> Option<StateProbe> {
        let reply = self.send("probe").ok()?;
        serde_json::from_str(reply.strip_prefix("PROBE ")?).ok()
    }

    fn drain_logs(&mut self) -> Vec<LogLine> {
        let Some(h) = self.handle.as_ref() else {
            return Vec::new();
        };
        let all = h.logs();
        let fresh = all[self.logs_seen.min(all.len())..].to_vec();
        self.logs_seen = all.len();
        fresh
    }

    fn exit_status(&mut self) -> Option<TargetExit> {
        if self.exit.is_none() {
            let status = self.handle.as_mut()?.try_status().ok()??;
            self.exit = Some(TargetExit {
                code: status.code(),
                signal: sandbox::exit_signal(&status),
            });
        }
        self.exit
    }
}

// ---------------------------------------------------------------------------
// Dispatch

#[derive(Debug)]
pub enum AnyTarget {
    Virtual(VirtualTarget),
    Process(ProcessTarget),
}

macro_rules! delegate {
    ($self:ident, $t:ident => $e:expr) => {
        match $self {
            AnyTarget::Virtual($t) => $e,
            AnyTarget::Process($t) => $e,
        }
    };
}

impl ObserverBackend for AnyTarget {
    fn screen_size(&self) -> (u32, u32) {
        delegate!(self, t => t.screen_size())
    }
    fn grab(&mut self) -> Result<Frame, ObserverError> {
        delegate!(self, t => t.grab())
    }
    fn now_ms(&self) -> u64 {
        delegate!(self, t => ObserverBackend::now_ms(t))
    }
}

impl ExecutorBackend for AnyTarget {
    fn bounds(&self) -> ScreenBounds {
        delegate!(self, t => t.bounds())
    }
    fn click(&mut self, x: i64, y: i64) -> Result<(), BackendError> {
        delegate!(self, t => t.click(x, y))
    }
    fn type_text(&mut self, text: &str) -> Result<(), BackendError> {
        delegate!(self, t => t.type_text(text))
    }
    fn key_chord(&mut self, keys: &[Key]) -> Result<(), BackendError> {
        delegate!(self, t => t.key_chord(keys))
    }
    fn press(&mut self, key: &Key) -> Result<(), BackendError> {
        delegate!(self, t => t.press(key))
    }
    fn scroll(&mut self, x: i64, y: i64, direction: Direction) -> Result<(), BackendError> {
        delegate!(self, t => t.scroll(x, y, direction))
    }
    fn idle(&mut self, seconds: f64, abort: &AbortFlag) -> Result<bool, BackendError> {
        delegate!(self, t => t.idle(seconds, abort))
    }
    fn now_ms(&self) -> u64 {
        delegate!(self, t => ExecutorBackend::now_ms(t))
    }
}

impl GuiTarget for AnyTarget {
    fn label(&self) -> String {
        delegate!(self, t => t.label())
    }
    fn probe(&mut self) -> Option<StateProbe> {
        delegate!(self, t => GuiTarget::probe(t))
    }
    fn drain_logs(&mut self) -> Vec<LogLine> {
        delegate!(self, t => GuiTarget::drain_logs(t))
    }
    fn exit_status(&mut self) -> Option<TargetExit> {
        delegate!(self, t => t.exit_status())
    }
}

/// Runs a variant command and reads the variant id from its last stdout line.
pub fn resolve_variant(command: &str, workdir: &Path, seed: u64, capture_dir: &Path) -> Result<TargetVariant, LaunchError> {
    let config = SandboxConfig::new(workdir, command, capture_dir)
        .seed(seed)
        .timeout(VARIANT_CMD_TIMEOUT);
    let record = sandbox::run(&config)?;
    if !record.success() {
        return Err(LaunchError::VariantCommand(format!(
            "`{command}` exited unsuccessfully: {}",
            record.output().trim()
        )));
    }
    let stdout = record.stdout();
    let last = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    last.parse()
        .map_err(|e: crate::virtual_target::TargetError| LaunchError::VariantCommand(e.to_string()))
}

/// Instantiates the target described by `spec`. `{playloop}` in a process
/// command is replaced by `self_exe` when given.
pub fn open_target(
    spec: &LaunchSpec,
    workdir: &Path,
    seed: u64,
    capture_dir: &Path,
    self_exe: Option<&Path>,
) -> Result<AnyTarget, LaunchError> {
    spec.validate()?;
    if let Some(id) = &spec.virtual_id {
        let variant: TargetVariant = id.parse().map_err(|e: crate::virtual_target::TargetError| {
            LaunchError::VariantCommand(e.to_string())
        })?;
        return Ok(AnyTarget::Virtual(VirtualTarget::new(variant, seed)));
    }
    if let Some(cmd) = &spec.variant_cmd {
        let variant = resolve_variant(cmd, workdir, seed, &capture_dir.join("variant"))?;
        return Ok(AnyTarget::Virtual(VirtualTarget::new(variant, seed)));
    }
    let mut command = spec.command.clone().unwrap_or_default();
    if let Some(exe) = self_exe {
        command = command.replace("{playloop}", &shlex::try_quote(&exe.display().to_string())
            .map(|q| q.into_owned())
            .unwrap_or_else(|_| exe.display().to_string()));
    }
    Ok(AnyTarget::Process(ProcessTarget::launch(&command, workdir, seed, capture_dir)?))
}
