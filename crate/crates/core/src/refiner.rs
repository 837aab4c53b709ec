//! Repair loop: diagnose a failure, ask for whole-file patches, apply them
//! atomically, rebuild, rerun and retest, up to a fixed iteration budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::developer::safe_join;
use crate::llm_gateway::{ChatRequest, LlmError, LlmSession, Message, PromptTemplates};
use crate::sandbox::{self, SandboxConfig};
use crate::tester::BehaviorReport;
use crate::trajectory::{sha256_hex, Trajectory, TrajectoryError};

pub const MAX_ITERATIONS: usize = 6;
pub const SMOKE_SECONDS: u64 = 5;
const MAX_EXCERPT_CHARS: usize = 4000;
const MAX_SUSPECTS: usize = 5;

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("nothing to diagnose: every input is empty")]
    NothingToDiagnose,
    #[error("no usable patch: {0}")]
    ProposalFailed(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureSource {
    Compile,
    Runtime,
    Behavior,
}

impl FailureSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureSource::Compile => "compile",
            FailureSource::Runtime => "runtime",
            FailureSource::Behavior => "behavior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excerpt {
    pub origin: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvidence {
    pub constraint: String,
    pub detail: String,
    pub frame: Option<String>,
    pub action: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub source: FailureSource,
    pub excerpts: Vec<Excerpt>,
    pub suspected_files: Vec<String>,
    /// (file, 1-based line) pairs found in diagnostics.
    pub locations: Vec<(String, usize)>,
    pub behavior: Option<BehaviorEvidence>,
}

fn clip(text: &str) -> String {
    let text = text.trim();
    if text.chars().count() <= MAX_EXCERPT_CHARS {
        return text.to_string();
    }
    // Keep the tail: compilers and tracebacks put the decisive line last.
    let skip = text.chars().count() - MAX_EXCERPT_CHARS;
    format!("...{}", text.chars().skip(skip).collect::<String>())
}

fn location_patterns() -> &'static [Regex; 2] {
    static PATTERNS: OnceLock<[Regex; 2]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            Regex::new(r#"File "([^"<>]+)", line (\d+)"#).expect("valid regex"),
            Regex::new(r"([A-Za-z0-9_.][A-Za-z0-9_./\\-]*\.[A-Za-z0-9]+):(\d+)").expect("valid regex"),
        ]
    })
}

/// File and line references in compiler or runtime output, in order of
/// first appearance.
pub fn extract_locations(text: &str) -> Vec<(String, usize)> {
    let mut found: Vec<(usize, String, usize)> = Vec::new();
    for re in location_patterns() {
        for cap in re.captures_iter(text) {
            let (Some(path), Some(line)) = (cap.get(1), cap.get(2)) else {
                continue;
            };
            if let Ok(n) = line.as_str().parse() {
                found.push((path.start(), path.as_str().to_string(), n));
            }
        }
    }
    found.sort();
    let mut seen = BTreeSet::new();
    found
        .into_iter()
        .filter(|(_, p, n)| seen.insert((p.clone(), *n)))
        .map(|(_, p, n)| (p, n))
        .collect()
}

/// Classifies a failure (compile before runtime before behavior) and
/// collects the evidence for the patch prompt.
pub fn diagnose(
    compile_out: &str,
    runtime_logs: &str,
    behavior: Option<&BehaviorReport>,
) -> Result<FailureSummary, RefinerError> {
    let failing_behavior = behavior.filter(|r| !r.passed());
    let source = if !compile_out.trim().is_empty() {
        FailureSource::Compile
    } else if !runtime_logs.trim().is_empty() {
        FailureSource::Runtime
    } else if failing_behavior.is_some() {
        FailureSource::Behavior
    } else {
        return Err(RefinerError::NothingToDiagnose);
    };
    let mut excerpts = Vec::new();
    let mut locations = Vec::new();
    let mut evidence = None;
    match source {
        FailureSource::Compile => {
            excerpts.push(Excerpt {
                origin: "compiler".into(),
                text: clip(compile_out),
            });
            locations = extract_locations(compile_out);
        }
        FailureSource::Runtime => {
            excerpts.push(Excerpt {
                origin: "runtime".into(),
                text: clip(runtime_logs),
            });
            locations = extract_locations(runtime_logs);
        }
        FailureSource::Behavior => {
            let report = failing_behavior.expect("checked above");
            let violated = report.constraint_results.iter().find(|r| !r.is_ok());
            let constraint = violated.map_or_else(|| report.reason.clone(), |r| r.name.clone());
            let detail = violated.map_or_else(|| report.reason.clone(), |r| r.evidence.clone());
            excerpts.push(Excerpt {
                origin: "behavior".into(),
                text: format!(
                    "verdict fail: {}\nconstraint {constraint}: {detail}\nactions: {}",
                    report.reason,
                    report.actions.join(", ")
                ),
            });
            evidence = Some(BehaviorEvidence {
                constraint,
                detail,
                frame: report.final_frame.clone(),
                action: report.actions.last().cloned(),
            });
        }
    }
    let mut suspected_files = Vec::new();
    for (path, _) in &locations {
        if !suspected_files.contains(path) {
            suspected_files.push(path.clone());
        }
    }
    Ok(FailureSummary {
        source,
        excerpts,
        suspected_files,
        locations,
        behavior: evidence,
    })
}

// ---------------------------------------------------------------------------
// Patches

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEdit {
    /// Path relative to the repository root.
    pub path: String,
    /// sha256 of the file when read; `None` means the file must not exist.
    pub expected_before_hash: Option<String>,
    pub new_content: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchSet {
    pub edits: Vec<FileEdit>,
}

impl PatchSet {
    pub fn paths(&self) -> Vec<&str> {
        self.edits.iter().map(|e| e.path.as_str()).collect()
    }
}

fn file_marker(line: &str) -> Option<String> {
    let rest = line.trim().trim_start_matches(['*', '#', ' ']);
    let rest = rest.strip_prefix("file:").or_else(|| rest.strip_prefix("File:"))?;
    let path = rest.trim().trim_matches(['`', '*', '"', '\'']).trim();
    (!path.is_empty() && !path.contains(char::is_whitespace)).then(|| path.to_string())
}

/// Splits a reply into `(path, content)` pairs: each `file: <path>` line
/// must be followed by a fenced block holding the whole file.
pub fn parse_patch_reply(text: &str) -> Result<Vec<(String, String)>, String> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let Some(path) = file_marker(lines[i]) else {
            i += 1;
            continue;
        };
        i += 1;
        while i < lines.len() && lines[i].trim().is_empty() {
            i += 1;
        }
        if i >= lines.len() || !lines[i].trim_start().starts_with("```") {
            return Err(format!("`file: {path}` is not followed by a code block"));
        }
        i += 1;
        let start = i;
        while i < lines.len() && !lines[i].trim_start().starts_with("```") {
            i += 1;
        }
        if i >= lines.len() {
            return Err(format!("code block for {path} is not closed"));
        }
        let mut content = lines[start..i].join("\n");
        content.push('\n');
        i += 1;
        if out.iter().any(|(p, _)| *p == path) {
            return Err(format!("{path} appears twice"));
        }
        out.push((path, content));
    }
    if out.is_empty() {
        return Err("no `file: <path>` blocks found".into());
    }
    Ok(out)
}

/// Normalizes a diagnostic path to one relative to `root`, if it exists.
fn resolve_suspect(root: &Path, path: &str) -> Option<String> {
    let p = Path::new(path);
    let rel = if p.is_absolute() {
        p.strip_prefix(root).ok()?.to_string_lossy().into_owned()
    } else {
        path.trim_start_matches("./").to_string()
    };
    safe_join(root, &rel).filter(|f| f.is_file()).map(|_| rel)
}

fn read_hash(path: &Path) -> io::Result<Option<String>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(sha256_hex(&bytes))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct ProposeConfig {
    pub templates: PromptTemplates,
    pub temperature: f64,
    /// Files to show when diagnostics name none.
    pub fallback_files: Vec<String>,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            temperature: crate::llm_gateway::DEFAULT_TEMPERATURE,
            fallback_files: Vec::new(),
        }
    }
}

/// Asks the model for whole-file replacements. One re-prompt is allowed
/// when the reply cannot be parsed or names a path outside the repository.
pub fn propose_patch(
    summary: &FailureSummary,
    repo_root: &Path,
    llm: &mut LlmSession,
    config: &ProposeConfig,
    trajectory: Option<&mut Trajectory>,
) -> Result<PatchSet, RefinerError> {
    let mut files: Vec<String> = summary
        .suspected_files
        .iter()
        .filter_map(|p| resolve_suspect(repo_root, p))
        .take(MAX_SUSPECTS)
        .collect();
    if files.is_empty() {
        files = config
            .fallback_files
            .iter()
            .filter_map(|p| resolve_suspect(repo_root, p))
            .collect();
    }
    files.dedup();

    let mut read_hashes: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut contents = Vec::new();
    for f in &files {
        let path = safe_join(repo_root, f).expect("resolved path");
        let bytes = fs::read(&path).unwrap_or_default();
        read_hashes.insert(f.clone(), Some(sha256_hex(&bytes)));
        contents.push(format!("file: {f}\n```\n{}```", String::from_utf8_lossy(&bytes)));
    }
    let mut snippets = Vec::new();
    for (file, line) in &summary.locations {
        let Some(rel) = resolve_suspect(repo_root, file) else {
            continue;
        };
        let text = fs::read_to_string(safe_join(repo_root, &rel).expect("resolved")).unwrap_or_default();
        let lines: Vec<&str> = text.lines().collect();
        let lo = line.saturating_sub(4).min(lines.len());
        let hi = (line + 3).min(lines.len());
        snippets.push(format!("{rel}:{line}\n{}", lines[lo..hi].join("\n")));
        if snippets.len() >= crate::developer::MAX_SNIPPETS {
            break;
        }
    }

    let excerpts = summary
        .excerpts
        .iter()
        .map(|e| format!("[{}]\n{}", e.origin, e.text))
        .collect::<Vec<_>>()
        .join("\n\n");
    let diagnosis = config.templates.render(
        "diagnosis",
        &[
            ("source", summary.source.as_str()),
            ("files", &if files.is_empty() { "(none identified)".to_string() } else { files.join(", ") }),
            ("excerpts", &excerpts),
        ],
    )?;
    let prompt = config.templates.render(
        "patch_generation",
        &[
            ("diagnosis", &diagnosis),
            ("snippets", &if snippets.is_empty() { "(none)".to_string() } else { snippets.join("\n---\n") }),
            ("files", &contents.join("\n\n")),
        ],
    )?;

    let mut trajectory = trajectory;
    let mut messages = vec![Message::user(prompt)];
    let mut last_error = String::new();
    for _ in 0..2 {
        let mut request = ChatRequest::new(messages.clone());
        request.temperature = config.temperature;
        let reply = match llm.complete(&request, trajectory.as_deref_mut()) {
            Ok(c) => c.text,
            Err(e) => return Err(RefinerError::ProposalFailed(e.to_string())),
        };
        let parsed = parse_patch_reply(&reply).and_then(|blocks| {
            let mut edits = Vec::new();
            for (path, content) in blocks {
                let rel = path.trim_start_matches("./").to_string();
                let full = safe_join(repo_root, &rel).ok_or_else(|| format!("{path} is outside the repository"))?;
                let before = match read_hashes.get(&rel) {
                    Some(h) => h.clone(),
                    None => read_hash(&full).map_err(|e| format!("cannot read {path}: {e}"))?,
                };
                edits.push(FileEdit {
                    path: rel,
                    expected_before_hash: before,
                    new_content: content.into_bytes(),
                });
            }
            Ok(PatchSet { edits })
        });
        match parsed {
            Ok(patch) => return Ok(patch),
            Err(e) => {
                last_error = e;
                messages.push(Message::assistant(reply));
                messages.push(Message::user(format!(
                    "The reply could not be applied: {last_error}. Use `file: <path>` lines followed by fenced blocks."
                )));
            }
        }
    }
    Err(RefinerError::ProposalFailed(last_error))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("{path} changed since it was read")]
    StaleHash { path: String },
    #[error("writing {path} failed: {message}")]
    IoFailure { path: String, message: String },
    #[error("{0} is outside the repository")]
    UnsafePath(String),
    #[error("{0} is edited twice")]
    DuplicatePath(String),
}

/// Where a write can be made to fail, for fault-injection tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// Before anything is written.
    BeforeTemp,
    /// After the temporary file is written, before the rename.
    BeforeRename,
    /// After the rename has replaced the target.
    AfterRename,
}

pub trait FileWriter {
    fn write_file(&mut self, path: &Path, bytes: &[u8]) -> io::Result<()>;
}

/// Temp-file-then-rename writer. An optional fault fails the n-th write
/// (0-based) at the given point.
#[derive(Debug, Default)]
pub struct AtomicWriter {
    pub fault: Option<(usize, FaultPoint)>,
    writes: usize,
}

impl AtomicWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing(at: usize, point: FaultPoint) -> Self {
        Self {
            fault: Some((at, point)),
            writes: 0,
        }
    }
}

fn injected(point: FaultPoint) -> io::Error {
    io::Error::other(format!("injected fault {point:?}"))
}

impl FileWriter for AtomicWriter {
    fn write_file(&mut self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let n = self.writes;
        self.writes += 1;
        let fault = self.fault.filter(|(at, _)| *at == n).map(|(_, p)| p);
        if fault == Some(FaultPoint::BeforeTemp) {
            return Err(injected(FaultPoint::BeforeTemp));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::Builder::new().prefix(".patch").tempfile_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        if fault == Some(FaultPoint::BeforeRename) {
            // Dropping `tmp` removes the temporary file.
            return Err(injected(FaultPoint::BeforeRename));
        }
        tmp.persist(path).map_err(|e| e.error)?;
        if fault == Some(FaultPoint::AfterRename) {
            return Err(injected(FaultPoint::AfterRename));
        }
        Ok(())
    }
}

fn restore(path: &Path, original: &Option<Vec<u8>>) -> io::Result<()> {
    match original {
        Some(bytes) => AtomicWriter::new().write_file(path, bytes),
        None => match fs::remove_file(path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        },
    }
}

/// Applies every edit or none. Hashes are checked first; on a write
/// failure the edits already made are rolled back from snapshots.
pub fn apply_patch(repo_root: &Path, patch: &PatchSet, writer: &mut dyn FileWriter) -> Result<(), ApplyError> {
    let mut targets = Vec::with_capacity(patch.edits.len());
    let mut seen = BTreeSet::new();
    for edit in &patch.edits {
        let full = safe_join(repo_root, &edit.path).ok_or_else(|| ApplyError::UnsafePath(edit.path.clone()))?;
        if !seen.insert(full.clone()) {
            return Err(ApplyError::DuplicatePath(edit.path.clone()));
        }
        let original = match fs::read(&full) {
            Ok(bytes) => Some(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => {
                return Err(ApplyError::IoFailure {
                    path: edit.path.clone(),
                    message: e.to_string(),
                })
            }
        };
        let current = original.as_deref().map(sha256_hex);
        if current != edit.expected_before_hash {
            return Err(ApplyError::StaleHash { path: edit.path.clone() });
        }
        targets.push((full, original));
    }
    for (i, edit) in patch.edits.iter().enumerate() {
        if let Err(e) = writer.write_file(&targets[i].0, &edit.new_content) {
            // Roll back this file too: the fault may strike after the rename.
            for (path, original) in targets[..=i].iter().rev() {
                let _ = restore(path, original);
            }
            return Err(ApplyError::IoFailure {
                path: edit.path.clone(),
                message: e.to_string(),
            });
        }
    }
    Ok(())
}

/// sha256 of every file under `root`, keyed by relative path.
pub fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .flatten()
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap_or(e.path()).to_string_lossy().into_owned();
            (rel, sha256_hex(&fs::read(e.path()).unwrap_or_default()))
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("no validator command configured")]
    Config,
    #[error("validation failed:\n{0}")]
    Validation(String),
}

/// Runs the validator command in the sandbox; exit 0 means the build is good.
pub fn validate_build(repo_root: &Path, validator_cmd: Option<&str>, capture_dir: &Path) -> Result<(), BuildError> {
    let cmd = validator_cmd.filter(|c| !c.trim().is_empty()).ok_or(BuildError::Config)?;
    let config = SandboxConfig::new(repo_root, cmd, capture_dir).timeout(Duration::from_secs(120));
    match sandbox::run(&config) {
        Ok(record) if record.success() => Ok(()),
        Ok(record) => {
            let mut out = record.output();
            if record.timed_out {
                out.push_str("\nvalidator timed out");
            }
            if out.trim().is_empty() {
                out = format!("validator exited with {:?}", record.exit_status);
            }
            Err(BuildError::Validation(out))
        }
        Err(e) => Err(BuildError::Validation(e.to_string())),
    }
}

/// Result of a smoke run: `Ok` when the program exited 0, or was still
/// running without a crash marker when the time limit hit.
pub fn smoke_run(repo_root: &Path, run_cmd: &str, seed: u64, seconds: u64, capture_dir: &Path) -> Result<(), String> {
    let config = SandboxConfig::new(repo_root, run_cmd, capture_dir)
        .seed(seed)
        .timeout(Duration::from_secs(seconds));
    let record = sandbox::run(&config).map_err(|e| e.to_string())?;
    let crashed = record.logs().iter().any(|l| l.is_crash());
    if crashed || (!record.timed_out && record.exit_status != Some(0)) {
        let mut out = record.output();
        if out.trim().is_empty() {
            out = format!("exit status {:?}, signal {:?}", record.exit_status, record.signal);
        }
        return Err(out);
    }
    Ok(())
}

/// Re-evaluates application behavior after a patch.
pub trait BehaviorCheck {
    fn evaluate(&mut self, repo_root: &Path, iteration: usize) -> Result<BehaviorReport, String>;
}

#[derive(Debug, Clone)]
pub struct RefinerConfig {
    pub max_iterations: usize,
    pub validator_cmd: Option<String>,
    pub run_cmd: Option<String>,
    pub smoke_seconds: u64,
    pub seed: u64,
    pub propose: ProposeConfig,
    /// Directory for sandbox captures of each iteration.
    pub work_dir: PathBuf,
}

impl RefinerConfig {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Self {
            max_iterations: MAX_ITERATIONS,
            validator_cmd: None,
            run_cmd: None,
            smoke_seconds: SMOKE_SECONDS,
            seed: 0,
            propose: ProposeConfig::default(),
            work_dir: work_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), RefinerError> {
        if self.max_iterations == 0 {
            return Err(RefinerError::Config("max_iterations must be at least 1".into()));
        }
        if self.validator_cmd.as_deref().map_or(true, |c| c.trim().is_empty()) {
            return Err(RefinerError::Config("no validator command configured".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStatus {
    Fixed,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Phase that stopped the iteration, `None` when behavior passed.
    pub failed_phase: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub status: RepairStatus,
    pub iterations_used: usize,
    pub trajectory: PathBuf,
    pub iterations: Vec<IterationRecord>,
    pub final_report: Option<BehaviorReport>,
}

/// Diagnose, propose, apply, validate, run, retest; stop at the first
/// passing behavior report or after `max_iterations`.
pub fn repair_loop(
    repo_root: &Path,
    initial: FailureSummary,
    llm: &mut LlmSession,
    checker: &mut dyn BehaviorCheck,
    config: &RefinerConfig,
    trajectory: &mut Trajectory,
) -> Result<RepairOutcome, RefinerError> {
    config.validate()?;
    let mut failure = initial;
    let mut iterations = Vec::new();
    let mut final_report = None;
    for iteration in 1..=config.max_iterations {
        trajectory.phase(format!("repair iteration {iteration}"))?;
        trajectory.decision(format!(
            "diagnosis: {} failure, suspects [{}]",
            failure.source.as_str(),
            failure.suspected_files.join(", ")
        ))?;
        let capture = config.work_dir.join(format!("iter{iteration}"));
        let stop = |phase: &str, detail: String, iterations: &mut Vec<IterationRecord>, t: &mut Trajectory| {
            let _ = t.decision(format!("iteration {iteration} stopped at {phase}: {}", first_line(&detail)));
            iterations.push(IterationRecord {
                iteration,
                failed_phase: Some(phase.to_string()),
                detail,
            });
        };

        trajectory.phase("propose")?;
        let patch = match propose_patch(&failure, repo_root, llm, &config.propose, Some(trajectory)) {
            Ok(p) => p,
            Err(RefinerError::Trajectory(e)) => return Err(RefinerError::Trajectory(e)),
            Err(e) => {
                let detail = e.to_string();
                failure.excerpts.push(Excerpt {
                    origin: format!("iteration {iteration} proposal"),
                    text: detail.clone(),
                });
                stop("propose", detail, &mut iterations, trajectory);
                continue;
            }
        };

        trajectory.phase("apply")?;
        if let Err(e) = apply_patch(repo_root, &patch, &mut AtomicWriter::new()) {
            let detail = e.to_string();
            failure.excerpts.push(Excerpt {
                origin: format!("iteration {iteration} apply"),
                text: detail.clone(),
            });
            stop("apply", detail, &mut iterations, trajectory);
            continue;
        }
        trajectory.decision(format!("applied patch to [{}]", patch.paths().join(", ")))?;

        trajectory.phase("validate")?;
        if let Err(e) = validate_build(repo_root, config.validator_cmd.as_deref(), &capture.join("validate")) {
            let diagnostics = match e {
                BuildError::Validation(d) => d,
                BuildError::Config => return Err(RefinerError::Config(e.to_string())),
            };
            failure = diagnose(&diagnostics, "", None)?;
            stop("validate", diagnostics, &mut iterations, trajectory);
            continue;
        }

        if let Some(run_cmd) = &config.run_cmd {
            trajectory.phase("run")?;
            if let Err(out) = smoke_run(repo_root, run_cmd, config.seed, config.smoke_seconds, &capture.join("run")) {
                failure = diagnose("", &out, None)?;
                stop("run", out, &mut iterations, trajectory);
                continue;
            }
        }

        trajectory.phase("retest")?;
        match checker.evaluate(repo_root, iteration) {
            Ok(report) if report.passed() => {
                trajectory.decision(format!("iteration {iteration}: behavior passed"))?;
                iterations.push(IterationRecord {
                    iteration,
                    failed_phase: None,
                    detail: report.reason.clone(),
                });
                return Ok(RepairOutcome {
                    status: RepairStatus::Fixed,
                    iterations_used: iteration,
                    trajectory: trajectory.path(),
                    iterations,
                    final_report: Some(report),
                });
            }
            Ok(report) => {
                failure = diagnose("", "", Some(&report))?;
                stop("retest", report.reason.clone(), &mut iterations, trajectory);
                final_report = Some(report);
            }
            Err(detail) => {
                failure.excerpts.push(Excerpt {
                    origin: format!("iteration {iteration} retest"),
                    text: detail.clone(),
                });
                stop("retest", detail, &mut iterations, trajectory);
            }
        }
    }
    trajectory.decision(format!("budget of {} iterations exhausted", config.max_iterations))?;
    Ok(RepairOutcome {
        status: RepairStatus::Exhausted,
        iterations_used: config.max_iterations,
        trajectory: trajectory.path(),
        iterations,
        final_report,
    })
}

fn first_line(s: &str) -> &str {
    s.trim().lines().next().unwrap_or("")
}
