//! Process sandbox: scrubbed environment, deterministic seed, output capture
//! and a hard timeout.
//!
//! Targets may report structured events by writing lines of the form
//! `PLAYLOG <level> <event> <key=value>...` to stderr. Only these lines make
//! up the standardized log; everything else is kept verbatim in the raw
//! capture files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEED_VAR: &str = "PLAY_SEED";
pub const LOG_PREFIX: &str = "PLAYLOG";

/// Variables passed through when no allow-list is configured.
pub const DEFAULT_ENV_ALLOW: &[&str] = &["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR"];

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const SHELL_META: &[char] = &[
    '|', '&', ';', '<', '>', '(', ')', '$', '`', '*', '?', '[', ']', '#', '~', '{', '}', '\n', '=',
    '!',
];

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to launch `{command}`: {source}")]
    Launch {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error("working directory {0} does not exist")]
    MissingWorkdir(PathBuf),
    #[error("empty command")]
    EmptyCommand,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One `PLAYLOG` line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub level: String,
    pub event: String,
    pub fields: BTreeMap<String, String>,
}

impl LogLine {
    pub fn new(level: &str, event: &str) -> Self {
        Self {
            level: level.to_ascii_uppercase(),
            event: event.to_string(),
            fields: BTreeMap::new(),
        }
    }

    pub fn field(mut self, key: &str, value: impl fmt::Display) -> Self {
        let value: String = value
            .to_string()
            .chars()
            .map(|c| if c.is_whitespace() { '_' } else { c })
            .collect();
        self.fields.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn parse(line: &str) -> Option<LogLine> {
        let mut parts = line.trim_end_matches(['\r', '\n']).split_whitespace();
        if parts.next()? != LOG_PREFIX {
            return None;
        }
        let level = parts.next()?.to_ascii_uppercase();
        let event = parts.next()?.to_string();
        let mut fields = BTreeMap::new();
        for kv in parts {
            let (k, v) = kv.split_once('=')?;
            if k.is_empty() {
                return None;
            }
            fields.insert(k.to_string(), v.to_string());
        }
        Some(LogLine { level, event, fields })
    }

    /// Crash markers: `FATAL` level or a `crash` event.
    pub fn is_crash(&self) -> bool {
        self.level == "FATAL" || self.event == "crash"
    }
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{LOG_PREFIX} {} {}", self.level, self.event)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

pub fn parse_log_text(text: &str) -> Vec<LogLine> {
    text.lines().filter_map(LogLine::parse).collect()
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub workdir: PathBuf,
    pub command: String,
    pub seed: u64,
    pub timeout: Duration,
    pub env_allow: Vec<String>,
    /// Harness protocol variables set in addition to the seed.
    pub extra_env: Vec<(String, String)>,
    /// Directory receiving `stdout.txt`, `stderr.txt` and `playlog.txt`.
    pub capture_dir: PathBuf,
    pub interactive: bool,
}

impl SandboxConfig {
    pub fn new(workdir: impl Into<PathBuf>, command: impl Into<String>, capture_dir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            command: command.into(),
            seed: 0,
            timeout: Duration::from_secs(60),
            env_allow: DEFAULT_ENV_ALLOW.iter().map(|s| s.to_string()).collect(),
            extra_env: Vec::new(),
            capture_dir: capture_dir.into(),
            interactive: false,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn interactive(mut self, interactive: bool) -> Self {
        self.interactive = interactive;
        self
    }

    pub fn env(mut self, key: &str, value: impl Into<String>) -> Self {
        self.extra_env.push((key.to_string(), value.into()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub exit_status: Option<i32>,
    pub signal: Option<i32>,
    pub timed_out: bool,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    pub log_path: PathBuf,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn success(&self) -> bool {
        !self.timed_out && self.exit_status == Some(0)
    }

    pub fn stdout(&self) -> String {
        fs::read_to_string(&self.stdout_path).unwrap_or_default()
    }

    pub fn stderr(&self) -> String {
        fs::read_to_string(&self.stderr_path).unwrap_or_default()
    }

    pub fn logs(&self) -> Vec<LogLine> {
        parse_log_text(&fs::read_to_string(&self.log_path).unwrap_or_default())
    }

    /// Combined stdout and stderr.
    pub fn output(&self) -> String {
        let mut s = self.stdout();
        s.push_str(&self.stderr());
        s
    }
}

pub struct ProcessHandle {
    child: Child,
    started: Instant,
    readers: Vec<JoinHandle<io::Result<()>>>,
    stdin: Option<ChildStdin>,
    stdout_lines: Receiver<String>,
    playlog: Arc<Mutex<Vec<LogLine>>>,
    stdout_path: PathBuf,
    stderr_path: PathBuf,
    log_path: PathBuf,
}

impl fmt::Debug for ProcessHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProcessHandle")
            .field("pid", &self.child.id())
            .finish_non_exhaustive()
    }
}

impl ProcessHandle {
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn stdin(&mut self) -> Option<&mut ChildStdin> {
        self.stdin.as_mut()
    }

    /// Next stdout line, waiting at most `timeout`.
    pub fn recv_line(&self, timeout: Duration) -> Option<String> {
        self.stdout_lines.recv_timeout(timeout).ok()
    }

    /// Standardized log lines seen so far.
    pub fn logs(&self) -> Vec<LogLine> {
        self.playlog.lock().map(|l| l.clone()).unwrap_or_default()
    }

    pub fn try_status(&mut self) -> io::Result<Option<ExitStatus>> {
        self.child.try_wait()
    }
}

fn split_command(command: &str) -> Result<(String, Vec<String>), SandboxError> {
    let trimmed = command.trim();
    if trimmed.is_empty() {
        return Err(SandboxError::EmptyCommand);
    }
    if !trimmed.contains(SHELL_META) {
        if let Some(mut words) = shlex::split(trimmed) {
            if !words.is_empty() {
                let program = words.remove(0);
                return Ok((program, words));
            }
        }
    }
    Ok(("sh".to_string(), vec!["-c".to_string(), trimmed.to_string()]))
}

/// Starts the command with a scrubbed environment and tee'd output.
pub fn launch(config: &SandboxConfig) -> Result<ProcessHandle, SandboxError> {
    if !config.workdir.is_dir() {
        return Err(SandboxError::MissingWorkdir(config.workdir.clone()));
    }
    fs::create_dir_all(&config.capture_dir)?;
    let (program, args) = split_command(&config.command)?;

    let mut cmd = Command::new(&program);
    cmd.args(&args)
        .current_dir(&config.workdir)
        .env_clear()
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .stdin(if config.interactive {
            Stdio::piped()
        } else {
            Stdio::null()
        });
    for key in &config.env_allow {
        if let Some(value) = std::env::var_os(key) {
            cmd.env(key, value);
        }
    }
    for (key, value) in &config.extra_env {
        cmd.env(key, value);
    }
    cmd.env(SEED_VAR, config.seed.to_string());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }

    let mut child = cmd.spawn().map_err(|source| SandboxError::Launch {
        command: config.command.clone(),
        source,
    })?;

    let stdout_path = config.capture_dir.join("stdout.txt");
    let stderr_path = config.capture_dir.join("stderr.txt");
    let log_path = config.capture_dir.join("playlog.txt");
    let playlog = Arc::new(Mutex::new(Vec::new()));
    let (tx, rx) = mpsc::channel();

    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let readers = vec![
        spawn_tee(stdout, File::create(&stdout_path)?, TeeSink::Lines(tx)),
        spawn_tee(
            stderr,
            File::create(&stderr_path)?,
            TeeSink::PlayLog(File::create(&log_path)?, Arc::clone(&playlog)),
        ),
    ];

    Ok(ProcessHandle {
        stdin: child.stdin.take(),
        child,
        started: Instant::now(),
        readers,
        stdout_lines: rx,
        playlog,
        stdout_path,
        stderr_path,
        log_path,
    })
}

enum TeeSink {
    Lines(Sender<String>),
    PlayLog(File, Arc<Mutex<Vec<LogLine>>>),
}

fn spawn_tee<R: Read + Send + 'static>(
    source: R,
    mut capture: File,
    mut sink: TeeSink,
) -> JoinHandle<io::Result<()>> {
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            if reader.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            capture.write_all(&buf)?;
            capture.flush()?;
            let line = String::from_utf8_lossy(&buf);
            match &mut sink {
                TeeSink::Lines(tx) => {
                    let _ = tx.send(line.trim_end_matches(['\r', '\n']).to_string());
                }
                TeeSink::PlayLog(file, lines) => {
                    if let Some(parsed) = LogLine::parse(&line) {
                        writeln!(file, "{parsed}")?;
                        if let Ok(mut lines) = lines.lock() {
                            lines.push(parsed);
                        }
                    }
                }
            }
        }
        Ok(())
    })
}

#[cfg(unix)]
fn kill_group(child: &mut Child) {
    // The child leads its own process group, so this also reaches grandchildren.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_group(child: &mut Child) {
    let _ = child.kill();
}

/// Waits for exit, killing the process group once `timeout` has elapsed.
pub fn wait_or_kill(mut handle: ProcessHandle, timeout: Duration) -> RunRecord {
    drop(handle.stdin.take());
    let deadline = handle.started + timeout;
    let mut timed_out = false;
    let status = loop {
        match handle.child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                timed_out = true;
                kill_group(&mut handle.child);
                break handle.child.wait().ok();
            }
            Ok(None) => thread::sleep(POLL_INTERVAL),
            Err(_) => break None,
        }
    };
    finish(handle, status, timed_out)
}

/// Kills a still-running process and collects its record.
pub fn terminate(mut handle: ProcessHandle) -> RunRecord {
    drop(handle.stdin.take());
    let status = match handle.child.try_wait() {
        Ok(Some(status)) => Some(status),
        _ => {
            kill_group(&mut handle.child);
            handle.child.wait().ok()
        }
    };
    finish(handle, status, false)
}

fn finish(handle: ProcessHandle, status: Option<ExitStatus>, timed_out: bool) -> RunRecord {
    #[cfg(unix)]
    if !timed_out {
        // Reap stragglers that kept the pipes open after the leader exited.
        unsafe {
            libc::kill(-(handle.child.id() as i32), libc::SIGKILL);
        }
    }
    let wall_time_secs = handle.started.elapsed().as_secs_f64();
    for reader in handle.readers {
        let _ = reader.join();
    }
    let (exit_status, signal) = match status {
        Some(s) => (s.code(), exit_signal(&s)),
        None => (None, None),
    };
    RunRecord {
        exit_status: if timed_out { None } else { exit_status },
        signal,
        timed_out,
        stdout_path: handle.stdout_path,
        stderr_path: handle.stderr_path,
        log_path: handle.log_path,
        wall_time_secs,
    }
}

#[cfg(unix)]
pub(crate) fn exit_signal(status: &ExitStatus) -> Option<i32> {
    use std::os::unix::process::ExitStatusExt;
    status.signal()
}

#[cfg(not(unix))]
pub(crate) fn exit_signal(_status: &ExitStatus) -> Option<i32> {
    None
}

/// Launches and waits with the configured timeout.
pub fn run(config: &SandboxConfig) -> Result<RunRecord, SandboxError> {
    let handle = launch(config)?;
    Ok(wait_or_kill(handle, config.timeout))
}

pub fn read_capture(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_default()
}
