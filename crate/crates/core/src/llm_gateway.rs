//! Chat-with-vision client over an OpenAI-compatible endpoint or a scripted
//! mock, with per-session token accounting and prompt templates.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::metrics::TokenLedger;
use crate::trajectory::{Trajectory, TrajectoryError};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const MAX_RETRIES: usize = 3;
/// Token charge for one attached image when a mock entry gives no count.
pub const IMAGE_TOKENS: u64 = 85;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint rejected the request ({status}): {body}")]
    Api { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("mock script exhausted after {0} entries")]
    MockExhausted(usize),
    #[error("mock entry {index} expects the last user message to contain {expected:?}")]
    MockMismatch { index: usize, expected: String },
    #[error("mock script {path}: line {line}: {message}")]
    Script { path: String, line: usize, message: String },
    #[error("no mock script for session (tried {0})")]
    NoScript(String),
    #[error("template `{name}`: {message}")]
    Template { name: String, message: String },
    #[error("invalid backend spec `{0}`")]
    BadSpec(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// A PNG attached to a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub name: String,
    pub png: Arc<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageAttachment>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, text)
    }

    fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn with_image(mut self, image: ImageAttachment) -> Self {
        self.images.push(image);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            model: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
    }

    /// Plain-text rendering used for sidecar files and digests.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&format!("[{}]\n{}\n", m.role.as_str(), m.text));
            for img in &m.images {
                out.push_str(&format!("<image {} {} bytes>\n", img.name, img.png.len()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

pub trait ChatBackend: Send {
    fn kind(&self) -> BackendKind;
    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, LlmError>;
}

// ---------------------------------------------------------------------------
// Mock

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_out: Option<u64>,
}

impl MockEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            pattern: None,
            reply: text.into(),
            tokens_in: None,
            tokens_out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockScript {
    entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        Self { entries }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(line).map_err(|e| LlmError::Script {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Script {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn entries(&self) -> &[MockEntry] {
        &self.entries
    }
}

fn estimate_tokens(chars: usize) -> u64 {
    chars.div_ceil(4) as u64
}

/// Replays a script strictly in order, one entry per request.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
    cursor: usize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script, cursor: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.script.entries.len() - self.cursor
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let Some(entry) = self.script.entries.get(self.cursor) else {
            return Err(LlmError::MockExhausted(self.script.entries.len()));
        };
        if let Some(pattern) = &entry.pattern {
            let last = request.last_user_text().unwrap_or("");
            if !last.contains(pattern.as_str()) {
                return Err(LlmError::MockMismatch {
                    index: self.cursor,
                    expected: pattern.clone(),
                });
            }
        }
        self.cursor += 1;
        let prompt_chars: usize = request.messages.iter().map(|m| m.text.chars().count()).sum();
        let images = request.messages.iter().map(|m| m.images.len()).sum::<usize>() as u64;
        Ok(Completion {
            text: entry.reply.clone(),
            tokens_in: entry
                .tokens_in
                .unwrap_or_else(|| estimate_tokens(prompt_chars) + images * IMAGE_TOKENS),
            tokens_out: entry
                .tokens_out
                .unwrap_or_else(|| estimate_tokens(entry.reply.chars().count())),
            latency_ms: 0,
            backend: BackendKind::Mock,
        })
    }
}

// ---------------------------------------------------------------------------
// Live

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl LiveConfig {
    /// Reads `PLAY_LLM_API_KEY` (or `OPENAI_API_KEY`) and `PLAY_LLM_MODEL`.
    pub fn from_env(base_url: &str) -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: var("PLAY_LLM_API_KEY").or_else(|| var("OPENAI_API_KEY")),
            model: var("PLAY_LLM_MODEL").unwrap_or_else(|| DEFAULT_MODEL.to_string()),
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let model = if request.model.is_empty() {
            &self.config.model
        } else {
            &request.model
        };
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                if m.images.is_empty() {
                    return json!({"role": m.role.as_str(), "content": m.text});
                }
                let mut parts = vec![json!({"type": "text", "text": m.text})];
                for img in &m.images {
                    let data = base64::engine::general_purpose::STANDARD.encode(img.png.as_slice());
                    parts.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{data}")}
                    }));
                }
                json!({"role": m.role.as_str(), "content": parts})
            })
            .collect();
        json!({
            "model": model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }
}

fn parse_chat_response(body: &Value) -> Result<(String, u64, u64), LlmError> {
    let content = &body["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(LlmError::BadResponse("missing choices[0].message.content".into())),
    };
    let usage = &body["usage"];
    Ok((
        text,
        usage["prompt_tokens"].as_u64().unwrap_or(0),
        usage["completion_tokens"].as_u64().unwrap_or(0),
    ))
}

impl ChatBackend for LiveBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn complete(&mut self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let started = Instant::now();
        let mut call = self
            .client
            .post(format!("{}/chat/completions", self.config.base_url))
            .json(&self.request_body(request));
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(LlmError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(LlmError::Api {
                status: status.as_u16(),
                body: text,
            });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let (text, tokens_in, tokens_out) = parse_chat_response(&body)?;
        Ok(Completion {
            text,
            tokens_in,
            tokens_out,
            latency_ms: started.elapsed().as_millis() as u64,
            backend: BackendKind::Live,
        })
    }
}

// ---------------------------------------------------------------------------
// Sessions

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Backoff before retry `attempt` (0-based): 1 s, 2 s, 4 s.
pub fn backoff(attempt: usize) -> Duration {
    Duration::from_secs(1 << attempt.min(10))
}

/// One conversation's backend plus its token ledger.
pub struct LlmSession {
    backend: Box<dyn ChatBackend>,
    ledger: TokenLedger,
    sleeper: Sleeper,
    model: String,
}

impl fmt::Debug for LlmSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmSession")
            .field("backend", &self.backend.kind())
            .field("ledger", &self.ledger)
            .finish()
    }
}

impl LlmSession {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        Self {
            backend,
            ledger: TokenLedger::new(1),
            sleeper: Arc::new(std::thread::sleep),
            model: String::new(),
        }
    }

    pub fn mock(script: MockScript) -> Self {
        Self::new(Box::new(MockBackend::new(script)))
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn ledger(&self) -> &TokenLedger {
        &self.ledger
    }

    pub fn ledger_total(&self) -> u64 {
        self.ledger.total_tokens()
    }

    /// Sends a request, retrying transport failures with 1/2/4 s backoff,
    /// then charges the ledger and records the exchange in `trajectory`.
    pub fn complete(
        &mut self,
        request: &ChatRequest,
        trajectory: Option<&mut Trajectory>,
    ) -> Result<Completion, LlmError> {
        request.validate()?;
        let mut request = request.clone();
        if request.model.is_empty() {
            request.model.clone_from(&self.model);
        }
        let mut attempt = 0;
        let completion = loop {
            match self.backend.complete(&request) {
                Ok(c) => break c,
                Err(e) if e.is_retryable() && attempt < MAX_RETRIES => {
                    (self.sleeper)(backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let call_id = format!("call{}", self.ledger.calls() + 1);
        self.ledger.record(call_id, completion.tokens_in, completion.tokens_out);
        if let Some(t) = trajectory {
            t.record_llm(
                &request.transcript(),
                &completion.text,
                completion.tokens_in,
                completion.tokens_out,
            )?;
        }
        Ok(completion)
    }
}

/// Where sessions come from: a live endpoint, a single mock script, or a
/// directory of per-session scripts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmProvider {
    Live(LiveConfig),
    MockFile(PathBuf),
    MockDir(PathBuf),
}

impl LlmProvider {
    /// Accepts `mock:<file-or-dir>` or an `http(s)://` base URL.
    pub fn from_spec(spec: &str) -> Result<Self, LlmError> {
        if let Some(path) = spec.strip_prefix("mock:") {
            let path = PathBuf::from(path);
            return if path.is_dir() {
                Ok(LlmProvider::MockDir(path))
            } else if path.is_file() {
                Ok(LlmProvider::MockFile(path))
            } else {
                Err(LlmError::BadSpec(format!("{spec}: no such file or directory")))
            };
        }
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(LlmProvider::Live(LiveConfig::from_env(spec)));
        }
        Err(LlmError::BadSpec(spec.to_string()))
    }

    /// Opens a session. For a script directory the first existing
    /// `<key>.jsonl` wins, then `default.jsonl`.
    pub fn session(&self, keys: &[String]) -> Result<LlmSession, LlmError> {
        match self {
            LlmProvider::Live(config) => {
                let mut session = LlmSession::new(Box::new(LiveBackend::new(config.clone())?));
                session.model.clone_from(&config.model);
                Ok(session)
            }
            LlmProvider::MockFile(path) => Ok(LlmSession::mock(MockScript::load(path)?)),
            LlmProvider::MockDir(dir) => {
                let candidates: Vec<PathBuf> = keys
                    .iter()
                    .map(|k| dir.join(format!("{k}.jsonl")))
                    .chain(std::iter::once(dir.join("default.jsonl")))
                    .collect();
                match candidates.iter().find(|p| p.is_file()) {
                    Some(path) => Ok(LlmSession::mock(MockScript::load(path)?)),
                    None => Err(LlmError::NoScript(
                        candidates
                            .iter()
                            .map(|p| p.display().to_string())
                            .collect::<Vec<_>>()
                            .join(", "),
                    )),
                }
            }
        }
    }

    pub fn is_mock(&self) -> bool {
        !matches!(self, LlmProvider::Live(_))
    }
}

// ---------------------------------------------------------------------------
// Prompt templates

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("gui_analysis", include_str!("../assets/prompts/gui_analysis.txt")),
    ("goal_driven", include_str!("../assets/prompts/goal_driven.txt")),
    ("coverage_driven", include_str!("../assets/prompts/coverage_driven.txt")),
    ("action_decision", include_str!("../assets/prompts/action_decision.txt")),
    ("diagnosis", include_str!("../assets/prompts/diagnosis.txt")),
    ("patch_generation", include_str!("../assets/prompts/patch_generation.txt")),
    ("generation", include_str!("../assets/prompts/generation.txt")),
    ("fewshot_1", include_str!("../assets/prompts/fewshot_1.txt")),
    ("fewshot_2", include_str!("../assets/prompts/fewshot_2.txt")),
];

/// Text templates with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            templates: BUILTIN_TEMPLATES
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates, with any `<name>.txt` in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, LlmError> {
        let mut t = Self::default();
        let entries = fs::read_dir(dir).map_err(|e| LlmError::Template {
            name: dir.display().to_string(),
            message: e.to_string(),
        })?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "txt") {
                let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let text = fs::read_to_string(&path).map_err(|e| LlmError::Template {
                    name: name.clone(),
                    message: e.to_string(),
                })?;
                t.templates.insert(name, text);
            }
        }
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }

    /// Fills every placeholder; a placeholder without a value is an error.
    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, LlmError> {
        let template = self.get(name).ok_or_else(|| LlmError::Template {
            name: name.to_string(),
            message: "unknown template".into(),
        })?;
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| LlmError::Template {
                name: name.to_string(),
                message: "unterminated placeholder".into(),
            })?;
            let key = after[..end].trim();
            let value = values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| LlmError::Template {
                    name: name.to_string(),
                    message: format!("no value for placeholder `{key}`"),
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}
