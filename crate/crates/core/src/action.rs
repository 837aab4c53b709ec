//! GUI action vocabulary and its textual call-form grammar.
//!
//! Model output is free text; the parser scans it for the first
//! `name(args)` whose name is one of the seven action names and ignores the
//! surrounding prose. Arguments are comma separated. Strings may be quoted
//! with `'` or `"` and accept the escapes `\\`, `\"`, `\'`, `\n`, `\t`, `\r`.
//!
//! ```text
//! click(x, y)            type("text")          hotkey(ctrl, s)
//! press(enter)           scroll(x, y, down)    wait(1.5)
//! finish(success)        finish(failure)
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_WAIT_SECONDS: f64 = 60.0;

const ACTION_NAMES: [&str; 7] = ["click", "type", "hotkey", "press", "scroll", "wait", "finish"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no action found in model output")]
    NoAction,
    #[error("malformed arguments for `{name}`: {detail}")]
    MalformedArguments { name: String, detail: String },
}

impl ParseError {
    fn malformed(name: &str, detail: impl Into<String>) -> Self {
        ParseError::MalformedArguments {
            name: name.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SafetyError {
    #[error("({x}, {y}) is outside the {}x{} screen", bounds.width, bounds.height)]
    OutOfBounds { x: i64, y: i64, bounds: ScreenBounds },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenBounds {
    pub width: u32,
    pub height: u32,
}

impl ScreenBounds {
    pub fn new(width: u32, height: u32) -> Option<Self> {
        (width > 0 && height > 0).then_some(Self { width, height })
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "up" => Some(Direction::Up),
            "down" => Some(Direction::Down),
            "left" => Some(Direction::Left),
            "right" => Some(Direction::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

/// A whitelisted key name, stored lowercase.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Key(String);

const NAMED_KEYS: [&str; 14] = [
    "ctrl", "alt", "shift", "meta", "up", "down", "left", "right", "enter", "esc", "space", "tab",
    "backspace", "delete",
];

impl Key {
    pub fn new(name: &str) -> Option<Self> {
        let lower = name.trim().to_ascii_lowercase();
        let ok = match lower.len() {
            0 => false,
            1 => lower.chars().all(|c| c.is_ascii_alphanumeric()),
            _ => {
                NAMED_KEYS.contains(&lower.as_str())
                    || lower
                        .strip_prefix('f')
                        .and_then(|n| n.parse::<u8>().ok())
                        .is_some_and(|n| (1..=12).contains(&n) && !lower[1..].starts_with('0'))
            }
        };
        ok.then_some(Key(lower))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Arrow keys map to a direction.
    pub fn direction(&self) -> Option<Direction> {
        Direction::parse(&self.0)
    }

    pub fn all_named() -> impl Iterator<Item = Key> {
        let letters = ('a'..='z').chain('0'..='9').map(|c| c.to_string());
        let fkeys = (1..=12).map(|n| format!("f{n}"));
        NAMED_KEYS
            .iter()
            .map(|s| s.to_string())
            .chain(letters)
            .chain(fkeys)
            .map(Key)
    }
}

impl TryFrom<String> for Key {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Key::new(&value).ok_or_else(|| format!("unknown key `{value}`"))
    }
}

impl From<Key> for String {
    fn from(key: Key) -> Self {
        key.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum ActionCommand {
    Click { x: i64, y: i64 },
    Type { text: String },
    Hotkey { keys: Vec<Key> },
    Press { key: Key },
    Scroll { x: i64, y: i64, direction: Direction },
    Wait { seconds: f64 },
    Finish { outcome: Outcome },
}

impl ActionCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ActionCommand::Click { .. } => "click",
            ActionCommand::Type { .. } => "type",
            ActionCommand::Hotkey { .. } => "hotkey",
            ActionCommand::Press { .. } => "press",
            ActionCommand::Scroll { .. } => "scroll",
            ActionCommand::Wait { .. } => "wait",
            ActionCommand::Finish { .. } => "finish",
        }
    }

    /// True for actions that deliver input to the application.
    pub fn is_input(&self) -> bool {
        !matches!(self, ActionCommand::Wait { .. } | ActionCommand::Finish { .. })
    }
}

impl fmt::Display for ActionCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_action(self))
    }
}

/// Canonical lowercase call-form of a command.
pub fn render_action(cmd: &ActionCommand) -> String {
    match cmd {
        ActionCommand::Click { x, y } => format!("click({x}, {y})"),
        ActionCommand::Type { text } => format!("type(\"{}\")", escape(text)),
        ActionCommand::Hotkey { keys } => format!(
            "hotkey({})",
            keys.iter().map(Key::as_str).collect::<Vec<_>>().join(", ")
        ),
        ActionCommand::Press { key } => format!("press({})", key.as_str()),
        ActionCommand::Scroll { x, y, direction } => {
            format!("scroll({x}, {y}, {})", direction.as_str())
        }
        ActionCommand::Wait { seconds } => format!("wait({seconds})"),
        ActionCommand::Finish { outcome } => match outcome {
            Outcome::Success => "finish(success)".to_string(),
            Outcome::Failure => "finish(failure)".to_string(),
        },
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// One argument of a call-form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallArg {
    Quoted(String),
    Bare(String),
}

impl CallArg {
    pub fn text(&self) -> &str {
        match self {
            CallArg::Quoted(s) | CallArg::Bare(s) => s,
        }
    }
}

/// A located `name(args)` in free text; `args` is `None` when the argument
/// list could not be tokenized (unterminated string or missing `)`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallForm {
    pub name: String,
    pub args: Option<Vec<CallArg>>,
    pub start: usize,
    pub end: usize,
}

/// Finds the first call-form in `text` whose name (case-insensitive) is in
/// `names`, at or after byte offset `from`.
pub fn find_call(text: &str, names: &[&str], from: usize) -> Option<CallForm> {
    let bytes = text.as_bytes();
    let mut i = from;
    while i < bytes.len() {
        if !is_ident_start(bytes[i]) || (i > 0 && is_ident(bytes[i - 1])) {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && is_ident(bytes[i]) {
            i += 1;
        }
        let ident = &text[start..i];
        let mut j = i;
        while j < bytes.len() && (bytes[j] == b' ' || bytes[j] == b'\t') {
            j += 1;
        }
        if j < bytes.len() && bytes[j] == b'(' {
            if let Some(name) = names.iter().find(|n| n.eq_ignore_ascii_case(ident)) {
                let (args, end) = match tokenize_args(text, j + 1) {
                    Some((args, end)) => (Some(args), end),
                    None => (None, text.len()),
                };
                return Some(CallForm {
                    name: name.to_string(),
                    args,
                    start,
                    end,
                });
            }
        }
    }
    None
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_ident(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Tokenizes an argument list starting right after `(`. Returns the
/// arguments and the byte offset just past the closing `)`.
fn tokenize_args(text: &str, start: usize) -> Option<(Vec<CallArg>, usize)> {
    let mut args = Vec::new();
    let mut chars = text[start..].char_indices().peekable();
    let mut bare = String::new();
    let mut quoted: Option<String> = None;
    let mut saw_any = false;

    let finish_arg = |bare: &mut String, quoted: &mut Option<String>, args: &mut Vec<CallArg>| {
        match quoted.take() {
            Some(q) => {
                if !bare.trim().is_empty() {
                    return false;
                }
                args.push(CallArg::Quoted(q));
            }
            None => args.push(CallArg::Bare(bare.trim().to_string())),
        }
        bare.clear();
        true
    };

    while let Some((off, c)) = chars.next() {
        match c {
            '"' | '\'' if bare.trim().is_empty() && quoted.is_none() => {
                let mut s = String::new();
                let mut closed = false;
                while let Some((_, d)) = chars.next() {
                    if d == c {
                        closed = true;
                        break;
                    }
                    if d == '\\' {
                        let (_, e) = chars.next()?;
                        s.push(match e {
                            'n' => '\n',
                            't' => '\t',
                            'r' => '\r',
                            other => other,
                        });
                    } else {
                        s.push(d);
                    }
                }
                if !closed {
                    return None;
                }
                bare.clear();
                quoted = Some(s);
                saw_any = true;
            }
            ',' => {
                if !finish_arg(&mut bare, &mut quoted, &mut args) {
                    return None;
                }
                saw_any = true;
            }
            ')' => {
                if (saw_any || !bare.trim().is_empty()) && !finish_arg(&mut bare, &mut quoted, &mut args) {
                    return None;
                }
                return Some((args, start + off + 1));
            }
            c => {
                if quoted.is_some() && !c.is_whitespace() {
                    // Text after a closing quote inside one argument.
                    return None;
                }
                bare.push(c);
                if !c.is_whitespace() {
                    saw_any = true;
                }
            }
        }
    }
    None
}

/// Extracts the first action call-form from model output.
pub fn parse_action(text: &str) -> Result<ActionCommand, ParseError> {
    let call = find_call(text, &ACTION_NAMES, 0).ok_or(ParseError::NoAction)?;
    let name = call.name.as_str();
    let args = call
        .args
        .ok_or_else(|| ParseError::malformed(name, "unterminated argument list"))?;
    build_action(name, &args)
}

fn build_action(name: &str, args: &[CallArg]) -> Result<ActionCommand, ParseError> {
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(ParseError::malformed(
                name,
                format!("expected {n} argument(s), got {}", args.len()),
            ))
        }
    };
    let int = |arg: &CallArg| {
        let s = arg.text().trim();
        let digits = s.strip_prefix(['-', '+']).unwrap_or(s);
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ParseError::malformed(name, format!("`{s}` is not an integer")));
        }
        s.parse::<i64>()
            .map_err(|_| ParseError::malformed(name, format!("`{s}` is out of range")))
    };
    let key = |arg: &CallArg| {
        Key::new(arg.text())
            .ok_or_else(|| ParseError::malformed(name, format!("unknown key `{}`", arg.text())))
    };

    match name {
        "click" => {
            arity(2)?;
            Ok(ActionCommand::Click {
                x: int(&args[0])?,
                y: int(&args[1])?,
            })
        }
        "type" => {
            arity(1)?;
            Ok(ActionCommand::Type {
                text: args[0].text().to_string(),
            })
        }
        "hotkey" => {
            if args.len() < 2 {
                return Err(ParseError::malformed(name, "hotkey needs at least two keys"));
            }
            let keys = args.iter().map(key).collect::<Result<Vec<_>, _>>()?;
            Ok(ActionCommand::Hotkey { keys })
        }
        "press" => {
            arity(1)?;
            Ok(ActionCommand::Press { key: key(&args[0])? })
        }
        "scroll" => {
            arity(3)?;
            let direction = Direction::parse(args[2].text().trim()).ok_or_else(|| {
                ParseError::malformed(name, format!("unknown direction `{}`", args[2].text()))
            })?;
            Ok(ActionCommand::Scroll {
                x: int(&args[0])?,
                y: int(&args[1])?,
                direction,
            })
        }
        "wait" => {
            arity(1)?;
            let s = args[0].text().trim();
            let numeric = !s.is_empty()
                && s.bytes().all(|b| b.is_ascii_digit() || b == b'.')
                && s.bytes().any(|b| b.is_ascii_digit());
            let seconds = numeric
                .then(|| s.parse::<f64>().ok())
                .flatten()
                .ok_or_else(|| ParseError::malformed(name, format!("`{s}` is not a duration")))?;
            if !(seconds > 0.0 && seconds <= MAX_WAIT_SECONDS) {
                return Err(ParseError::malformed(
                    name,
                    format!("duration must be in (0, {MAX_WAIT_SECONDS}] seconds"),
                ));
            }
            Ok(ActionCommand::Wait { seconds })
        }
        "finish" => {
            arity(1)?;
            let outcome = match args[0].text().trim().to_ascii_lowercase().as_str() {
                "success" => Outcome::Success,
                "failure" => Outcome::Failure,
                other => {
                    return Err(ParseError::malformed(name, format!("unknown outcome `{other}`")))
                }
            };
            Ok(ActionCommand::Finish { outcome })
        }
        _ => Err(ParseError::NoAction),
    }
}

/// Checks pointer coordinates against the screen before execution.
pub fn validate_action(cmd: &ActionCommand, bounds: ScreenBounds) -> Result<(), SafetyError> {
    match *cmd {
        ActionCommand::Click { x, y } | ActionCommand::Scroll { x, y, .. } => {
            if bounds.contains(x, y) {
                Ok(())
            } else {
                Err(SafetyError::OutOfBounds { x, y, bounds })
            }
        }
        _ => Ok(()),
    }
}
