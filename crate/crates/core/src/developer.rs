//! Repository-aware candidate generation: grep-style context search,
//! read-only tools the model may call, few-shot prompting, and insertion of
//! the generated function at its anchor.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::action::{find_call, CallArg};
use crate::llm_gateway::{ChatRequest, LlmError, LlmSession, Message, PromptTemplates};
use crate::metrics::TokenLedger;
use crate::sandbox::{self, SandboxConfig};
use crate::trajectory::{Trajectory, TrajectoryError};

pub const CONTEXT_LINES: usize = 3;
pub const MAX_SNIPPETS: usize = 5;
pub const EXEMPLARS: usize = 2;
pub const MAX_TOOL_ROUNDS: usize = 4;
const READ_LIMIT_LINES: usize = 200;
const SHELL_ALLOW: &[&str] = &["ls", "cat", "head", "tail", "wc", "grep", "find"];
const FIND_DENY: &[&str] = &["-exec", "-execdir", "-delete", "-ok", "-okdir", "-fprint", "-fprintf", "-fls"];
const TOOL_NAMES: &[&str] = &["search", "read_file", "shell"];

#[derive(Debug, Error)]
pub enum DeveloperError {
    #[error("invalid search pattern: {0}")]
    InvalidRegex(String),
    #[error("task {task}: {message}")]
    Task { task: String, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub function_signature: String,
    pub requirement: String,
    pub repo_root: PathBuf,
    /// Path of the file to edit, relative to `repo_root`.
    pub target_file: PathBuf,
    /// Function name; the file holds one `@generate(<anchor>)` marker line.
    pub anchor: String,
}

pub fn anchor_marker(name: &str) -> String {
    format!("@generate({name})")
}

impl TaskSpec {
    fn error(&self, message: impl Into<String>) -> DeveloperError {
        DeveloperError::Task {
            task: self.id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), DeveloperError> {
        self.validate_in(&self.repo_root)
    }

    /// Checks the target file and marker inside `root` (a working copy).
    pub fn validate_in(&self, root: &Path) -> Result<(), DeveloperError> {
        let path = safe_join(root, &self.target_file.to_string_lossy())
            .ok_or_else(|| self.error("target file escapes the repository"))?;
        let text = fs::read_to_string(&path)
            .map_err(|e| self.error(format!("cannot read {}: {e}", path.display())))?;
        let marker = anchor_marker(&self.anchor);
        match text.lines().filter(|l| l.contains(&marker)).count() {
            1 => Ok(()),
            0 => Err(self.error(format!("marker `{marker}` not found"))),
            n => Err(self.error(format!("marker `{marker}` occurs {n} times"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub code: String,
    pub tool_calls: usize,
    pub tokens: TokenLedger,
}

impl Candidate {
    pub fn is_empty(&self) -> bool {
        self.code.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    /// Path relative to the repository root, `/`-separated.
    pub path: String,
    /// 1-based line number of the match.
    pub line: usize,
    pub snippet: String,
}

/// Resolves `rel` under `root`, refusing absolute paths and `..`.
pub fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel.trim());
    if rel.as_os_str().is_empty() {
        return None;
    }
    let mut out = root.to_path_buf();
    for comp in rel.components() {
        match comp {
            Component::Normal(c) => out.push(c),
            Component::CurDir => {}
            _ => return None,
        }
    }
    Some(out)
}

fn is_hidden(entry: &walkdir::DirEntry) -> bool {
    entry.depth() > 0 && entry.file_name().to_string_lossy().starts_with('.')
}

enum Matcher {
    Literal(String),
    Pattern(Regex),
}

impl Matcher {
    fn new(query: &str) -> Result<Self, DeveloperError> {
        if query.len() >= 2 && query.starts_with('/') && query.ends_with('/') {
            let re = Regex::new(&query[1..query.len() - 1]).map_err(|e| DeveloperError::InvalidRegex(e.to_string()))?;
            Ok(Matcher::Pattern(re))
        } else {
            Ok(Matcher::Literal(query.to_string()))
        }
    }

    fn is_match(&self, line: &str) -> bool {
        match self {
            Matcher::Literal(s) => line.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(line),
        }
    }
}

/// Scans text files under `repo_root` for `query`, a literal substring or
/// a regex written as `/pattern/`. Hits are ordered by (path, line); each
/// snippet is the matching line with three lines of context either side.
/// Hidden entries, binary files and non-UTF-8 files are skipped.
pub fn context_search(query: &str, repo_root: &Path, max_hits: usize) -> Result<Vec<SearchHit>, DeveloperError> {
    let matcher = Matcher::new(query)?;
    let mut hits = Vec::new();
    if query.is_empty() || max_hits == 0 {
        return Ok(hits);
    }
    let walker = WalkDir::new(repo_root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| !is_hidden(e));
    for entry in walker.flatten() {
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(bytes) = fs::read(entry.path()) else {
            continue;
        };
        if bytes.contains(&0) {
            continue;
        }
        let Ok(text) = String::from_utf8(bytes) else {
            continue;
        };
        let rel = entry
            .path()
            .strip_prefix(repo_root)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if matcher.is_match(line) {
                let lo = i.saturating_sub(CONTEXT_LINES);
                let hi = (i + CONTEXT_LINES + 1).min(lines.len());
                hits.push(SearchHit {
                    path: rel.clone(),
                    line: i + 1,
                    snippet: lines[lo..hi].join("\n"),
                });
                if hits.len() >= max_hits {
                    return Ok(hits);
                }
            }
        }
    }
    Ok(hits)
}

/// Contents of the first fenced code block, without the fence lines.
pub fn extract_code_block(text: &str) -> Option<String> {
    let open = text.find("```")?;
    let after_fence = &text[open + 3..];
    let body_start = after_fence.find('\n')? + 1;
    let body = &after_fence[body_start..];
    let close = if body.starts_with("```") {
        0
    } else {
        body.find("\n```")? + 1
    };
    Some(body[..close].trim_end_matches('\n').to_string())
}

/// Replaces the marker line with `code`, indented like the marker.
pub fn insert_candidate(root: &Path, task: &TaskSpec, code: &str) -> Result<(), DeveloperError> {
    task.validate_in(root)?;
    let path = safe_join(root, &task.target_file.to_string_lossy()).expect("validated path");
    let text = fs::read_to_string(&path)?;
    let marker = anchor_marker(&task.anchor);
    let mut out = String::with_capacity(text.len() + code.len());
    for segment in text.split_inclusive('\n') {
        if !segment.contains(&marker) {
            out.push_str(segment);
            continue;
        }
        let indent: String = segment.chars().take_while(|c| *c == ' ' || *c == '\t').collect();
        let ending = if segment.ends_with("\r\n") {
            "\r\n"
        } else if segment.ends_with('\n') {
            "\n"
        } else {
            ""
        };
        let lines: Vec<&str> = code.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if !line.is_empty() {
                out.push_str(&indent);
                out.push_str(line);
            }
            if i + 1 < lines.len() {
                out.push_str(if ending.is_empty() { "\n" } else { ending });
            }
        }
        out.push_str(ending);
    }
    fs::write(&path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub max_snippets: usize,
    pub exemplars: usize,
    pub max_tool_rounds: usize,
    pub templates: PromptTemplates,
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_snippets: MAX_SNIPPETS,
            exemplars: EXEMPLARS,
            max_tool_rounds: MAX_TOOL_ROUNDS,
            templates: PromptTemplates::default(),
            temperature: crate::llm_gateway::DEFAULT_TEMPERATURE,
        }
    }
}

/// Executes tool calls found in model replies.
struct Toolbox<'a> {
    root: &'a Path,
    max_snippets: usize,
    snippets_used: usize,
}

impl Toolbox<'_> {
    fn run(&mut self, name: &str, args: &[CallArg]) -> String {
        let arg = args.first().map(CallArg::text).unwrap_or("");
        match name {
            "search" => self.search(arg),
            "read_file" => self.read_file(arg),
            "shell" => self.shell(arg),
            _ => format!("unknown tool `{name}`"),
        }
    }

    fn search(&mut self, query: &str) -> String {
        let budget = self.max_snippets.saturating_sub(self.snippets_used);
        if budget == 0 {
            return "snippet limit reached".to_string();
        }
        match context_search(query, self.root, budget) {
            Ok(hits) if hits.is_empty() => format!("no matches for {query:?}"),
            Ok(hits) => {
                self.snippets_used += hits.len();
                hits.iter()
                    .map(|h| format!("{}:{}\n{}", h.path, h.line, h.snippet))
                    .collect::<Vec<_>>()
                    .join("\n---\n")
            }
            Err(e) => e.to_string(),
        }
    }

    fn read_file(&self, rel: &str) -> String {
        let Some(path) = safe_join(self.root, rel) else {
            return format!("refused: {rel} is outside the repository");
        };
        match fs::read_to_string(&path) {
            Ok(text) => text.lines().take(READ_LIMIT_LINES).collect::<Vec<_>>().join("\n"),
            Err(e) => format!("cannot read {rel}: {e}"),
        }
    }

    fn shell(&self, command: &str) -> String {
        if let Err(why) = check_shell_command(command) {
            return format!("refused: {why}");
        }
        let Ok(capture) = tempfile::tempdir() else {
            return "shell unavailable".to_string();
        };
        let config = SandboxConfig::new(self.root, command, capture.path()).timeout(Duration::from_secs(10));
        match sandbox::run(&config) {
            Ok(record) => record.output(),
            Err(e) => e.to_string(),
        }
    }
}

/// Accepts only read-only listing, reading and searching commands.
pub fn check_shell_command(command: &str) -> Result<(), String> {
    if command.contains(['|', '&', ';', '<', '>', '`', '$', '\n']) {
        return Err("shell operators are not allowed".into());
    }
    let words = shlex::split(command).ok_or("unbalanced quotes")?;
    let program = words.first().ok_or("empty command")?;
    if !SHELL_ALLOW.contains(&program.as_str()) {
        return Err(format!("`{program}` is not an allowed command"));
    }
    if program == "find" {
        if let Some(bad) = words.iter().find(|w| FIND_DENY.contains(&w.as_str())) {
            return Err(format!("find {bad} is not allowed"));
        }
    }
    if words.iter().skip(1).any(|w| w.starts_with('/') || w.split('/').any(|p| p == "..")) {
        return Err("paths must stay inside the repository".into());
    }
    Ok(())
}

fn tool_calls(text: &str) -> Vec<(String, Vec<CallArg>)> {
    let mut calls = Vec::new();
    let mut from = 0;
    while let Some(call) = find_call(text, TOOL_NAMES, from) {
        from = call.end.max(call.start + 1);
        if let Some(args) = call.args {
            calls.push((call.name, args));
        }
    }
    calls
}

fn build_prompt(task: &TaskSpec, config: &GenerationConfig) -> Result<String, LlmError> {
    let examples = (1..=config.exemplars)
        .filter_map(|i| config.templates.get(&format!("fewshot_{i}")))
        .map(|e| format!("Example:\n{e}"))
        .collect::<Vec<_>>()
        .join("\n");
    config.templates.render(
        "generation",
        &[
            ("signature", &task.function_signature),
            ("requirement", &task.requirement),
            ("target_file", &task.target_file.to_string_lossy()),
            ("examples", &examples),
            ("context", ""),
        ],
    )
}

/// Generates `n` candidates in sequence. Each sample may spend up to
/// `max_tool_rounds` replies on tool calls; a reply with neither code nor
/// tool calls gets one re-prompt, after which the candidate is empty.
pub fn generate_candidates(
    task: &TaskSpec,
    llm: &mut LlmSession,
    n: usize,
    config: &GenerationConfig,
    trajectory: &mut Trajectory,
) -> Result<Vec<Candidate>, DeveloperError> {
    if n == 0 {
        return Err(task.error("n must be at least 1"));
    }
    task.validate()?;
    trajectory.phase(format!("generate {}", task.id))?;
    let prompt = build_prompt(task, config)?;
    let mut candidates = Vec::with_capacity(n);
    for index in 0..n {
        let first_call = llm.ledger().calls();
        let mut toolbox = Toolbox {
            root: &task.repo_root,
            max_snippets: config.max_snippets,
            snippets_used: 0,
        };
        let mut messages = vec![Message::user(prompt.clone())];
        let mut tool_count = 0;
        let mut tool_rounds = 0;
        let mut reprompted = false;
        let code = loop {
            let mut request = ChatRequest::new(messages.clone());
            request.temperature = config.temperature;
            let reply = llm.complete(&request, Some(trajectory))?.text;
            if let Some(code) = extract_code_block(&reply) {
                break code;
            }
            let calls = tool_calls(&reply);
            messages.push(Message::assistant(reply));
            if !calls.is_empty() && tool_rounds < config.max_tool_rounds {
                tool_rounds += 1;
                let mut results = Vec::new();
                for (name, args) in &calls {
                    let arg_text = args.iter().map(CallArg::text).collect::<Vec<_>>().join("\u{1f}");
                    trajectory.record_tool(name, &arg_text)?;
                    tool_count += 1;
                    results.push(format!("{name} result:\n{}", toolbox.run(name, args)));
                }
                messages.push(Message::user(results.join("\n\n")));
                continue;
            }
            if reprompted {
                trajectory.decision(format!("sample {index}: no code block, candidate left empty"))?;
                break String::new();
            }
            reprompted = true;
            messages.push(Message::user(
                "Reply with the complete function in one fenced code block.".to_string(),
            ));
        };
        let mut tokens = TokenLedger::new(1);
        for call in &llm.ledger().per_call()[first_call..] {
            tokens.record(call.call_id.clone(), call.tokens_in, call.tokens_out);
        }
        candidates.push(Candidate {
            index,
            code,
            tool_calls: tool_count,
            tokens,
        });
    }
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{MockEntry, MockScript};
    use crate::trajectory::{load, Clock, EventPayload};

    fn repo() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("board.py"),
            "import random\n\n\nclass Board:\n    # @generate(swipe)\n\n    def reset(self):\n        pass\n",
        )
        .unwrap();
        fs::create_dir(dir.path().join("util")).unwrap();
        fs::write(dir.path().join("util/moves.py"), "def swipe_left(row):\n    return row\n").unwrap();
        fs::write(dir.path().join("blob.bin"), [0u8, 1, 2, b'd']).unwrap();
        fs::create_dir(dir.path().join(".git")).unwrap();
        fs::write(dir.path().join(".git/config"), "def swipe hidden\n").unwrap();
        dir
    }

    fn task(root: &Path) -> TaskSpec {
        TaskSpec {
            id: "t".into(),
            function_signature: "def swipe(self, direction):".into(),
            requirement: "Slide tiles.".into(),
            repo_root: root.to_path_buf(),
            target_file: "board.py".into(),
            anchor: "swipe".into(),
        }
    }

    #[test]
    fn search_orders_by_path_and_line() {
        let r = repo();
        let hits = context_search("def ", r.path(), 10).unwrap();
        let keys: Vec<_> = hits.iter().map(|h| (h.path.as_str(), h.line)).collect();
        assert_eq!(keys, vec![("board.py", 7), ("util/moves.py", 1)]);
        assert!(hits[0].snippet.contains("@generate(swipe)"));
        assert!(context_search("zzz", r.path(), 10).unwrap().is_empty());
        assert_eq!(context_search("/swipe_\\w+/", r.path(), 10).unwrap().len(), 1);
        assert!(matches!(context_search("/(/", r.path(), 10), Err(DeveloperError::InvalidRegex(_))));
        assert_eq!(context_search("def ", r.path(), 1).unwrap().len(), 1);
        assert_eq!(hits, context_search("def ", r.path(), 10).unwrap());
    }

    #[test]
    fn code_block_extraction() {
        assert_eq!(extract_code_block("x\n```python\na\nb\n```\n```\nc\n```").unwrap(), "a\nb");
        assert_eq!(extract_code_block("```\n```").unwrap(), "");
        assert!(extract_code_block("no code").is_none());
        assert!(extract_code_block("```python\nunterminated").is_none());
    }

    #[test]
    fn insertion_touches_only_the_marker_line() {
        let r = repo();
        let t = task(r.path());
        insert_candidate(r.path(), &t, "def swipe(self, d):\n\n    return d").unwrap();
        let text = fs::read_to_string(r.path().join("board.py")).unwrap();
        assert_eq!(
            text,
            "import random\n\n\nclass Board:\n    def swipe(self, d):\n\n        return d\n\n    def reset(self):\n        pass\n"
        );
        assert!(insert_candidate(r.path(), &t, "x").is_err(), "marker consumed");
    }

    #[test]
    fn shell_allow_list() {
        assert!(check_shell_command("ls -la util").is_ok());
        assert!(check_shell_command("grep -n swipe board.py").is_ok());
        assert!(check_shell_command("rm board.py").is_err());
        assert!(check_shell_command("cat board.py > x").is_err());
        assert!(check_shell_command("find . -delete").is_err());
        assert!(check_shell_command("cat ../secret").is_err());
        assert!(check_shell_command("cat /etc/passwd").is_err());
    }

    fn generate(replies: &[&str], n: usize) -> (Vec<Candidate>, Vec<EventPayload>, tempfile::TempDir) {
        let r = repo();
        let t = task(r.path());
        let dir = tempfile::tempdir().unwrap();
        let mut traj = Trajectory::create(dir.path(), Clock::logical()).unwrap();
        let mut llm = LlmSession::mock(MockScript::new(replies.iter().map(|s| MockEntry::reply(*s)).collect()));
        let c = generate_candidates(&t, &mut llm, n, &GenerationConfig::default(), &mut traj).unwrap();
        let events = load(&traj.path()).unwrap().into_iter().map(|e| e.payload).collect();
        (c, events, r)
    }

    #[test]
    fn three_valid_candidates() {
        let body = "```python\ndef swipe(self, d):\n    pass\n```";
        let (c, _, _r) = generate(&[body, body, body], 3);
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|c| c.code == "def swipe(self, d):\n    pass"));
        assert_eq!(c.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn prose_twice_leaves_candidate_empty() {
        let body = "```\ndef swipe(self, d):\n    pass\n```";
        let (c, _, _r) = generate(&[body, "I would slide.", "Still prose.", body], 3);
        assert!(!c[0].is_empty());
        assert!(c[1].is_empty());
        assert!(!c[2].is_empty());
        assert_eq!(c[1].tokens.calls(), 2);
    }

    #[test]
    fn tool_calls_are_counted_and_recorded() {
        let (c, events, _r) = generate(
            &[
                "search(\"def swipe\") and read_file(\"util/moves.py\")",
                "shell(\"ls\")",
                "```\ndef swipe(self, d):\n    return swipe_left(d)\n```",
            ],
            1,
        );
        assert_eq!(c[0].tool_calls, 3);
        let recorded = events.iter().filter(|e| e.kind() == "tool_use").count();
        assert_eq!(recorded, c[0].tool_calls);
    }

    #[test]
    fn generation_is_deterministic() {
        let replies = ["search(\"swipe\")", "```\ndef swipe(self, d): pass\n```"];
        let (a, ea, _r1) = generate(&replies, 1);
        let (b, eb, _r2) = generate(&replies, 1);
        assert_eq!(a, b);
        assert_eq!(ea, eb);
    }
}
