//! Behavioral test sessions: observe, ask the model for one action, execute,
//! check constraints, repeat until the agent finishes, a check fails, or the
//! step budget runs out.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{parse_action, render_action, validate_action, ActionCommand, Outcome};
use crate::executor::{AbortFlag, ActionStatus, ExecutorBackend, Executor};
use crate::llm_gateway::{ChatRequest, ImageAttachment, LlmError, LlmSession, Message, PromptTemplates};
use crate::observer::{diff, diff_region, Frame, FrameCache, Observer, ObserverBackend, ObserverError};
use crate::sandbox::LogLine;
use crate::target::{open_target, GuiTarget, LaunchSpec, TargetExit};
use crate::trajectory::{EventPayload, Trajectory, TrajectoryError};
use crate::virtual_target::{glyph_rect, StateProbe};

pub const DEFAULT_STEP_BUDGET: usize = 40;
pub const HISTORY_LEN: usize = 10;
/// Consecutive unchanged captures after an input that count as a freeze.
pub const FREEZE_CAPTURES: usize = 3;

#[derive(Debug, Error)]
pub enum TesterError {
    #[error("profile {path}: {message}")]
    Profile { path: String, message: String },
    #[error("model call failed: {0}")]
    Llm(#[from] LlmError),
    #[error("trajectory write failed: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("capture failed: {0}")]
    Observer(#[from] ObserverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    Game,
    Application,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    GoalDriven,
    CoverageDriven,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::GoalDriven => "goal_driven",
            Strategy::CoverageDriven => "coverage_driven",
        }
    }
}

/// Named behavioral checks a profile can declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    NoCrash,
    NoFreeze,
    CollisionEndsGame,
    VisibleFeedback,
}

impl Check {
    pub const ALL: [Check; 4] = [Check::NoCrash, Check::NoFreeze, Check::CollisionEndsGame, Check::VisibleFeedback];

    pub fn name(self) -> &'static str {
        match self {
            Check::NoCrash => "no_crash",
            Check::NoFreeze => "no_freeze",
            Check::CollisionEndsGame => "collision_ends_game",
            Check::VisibleFeedback => "visible_feedback",
        }
    }

    pub fn from_name(name: &str) -> Option<Check> {
        Check::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_budget() -> usize {
    DEFAULT_STEP_BUDGET
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppProfile {
    pub name: String,
    pub kind: AppKind,
    pub objective: String,
    #[serde(default)]
    pub constraints: Vec<String>,
    pub launch: LaunchSpec,
    #[serde(default = "default_budget")]
    pub step_budget: usize,
    /// Longest side of screenshots sent to the model; full size when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_dim: Option<u32>,
}

impl AppProfile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, TesterError> {
        let profile: AppProfile = toml::from_str(text).map_err(|e| TesterError::Profile {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        profile.validate().map_err(|message| TesterError::Profile {
            path: origin.to_string(),
            message,
        })?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, TesterError> {
        let text = fs::read_to_string(path).map_err(|e| TesterError::Profile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.step_budget == 0 {
            return Err("step_budget must be at least 1".into());
        }
        if let Some(unknown) = self.constraints.iter().find(|c| Check::from_name(c).is_none()) {
            return Err(format!("unknown constraint `{unknown}`"));
        }
        self.launch.validate().map_err(|e| e.to_string())
    }

    /// Built-in checks followed by the declared ones, without duplicates.
    pub fn checks(&self) -> Vec<Check> {
        let mut seen = BTreeSet::new();
        [Check::NoCrash, Check::NoFreeze]
            .into_iter()
            .chain(self.constraints.iter().filter_map(|c| Check::from_name(c)))
            .filter(|c| seen.insert(*c))
            .collect()
    }
}

pub fn choose_strategy(profile: &AppProfile) -> Strategy {
    match profile.kind {
        AppKind::Game => Strategy::GoalDriven,
        AppKind::Application => Strategy::CoverageDriven,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Ok,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintResult {
    pub name: String,
    pub status: CheckStatus,
    pub evidence: String,
}

impl ConstraintResult {
    fn ok(check: Check, evidence: impl Into<String>) -> Self {
        Self {
            name: check.name().to_string(),
            status: CheckStatus::Ok,
            evidence: evidence.into(),
        }
    }

    fn violated(check: Check, evidence: impl Into<String>) -> Self {
        Self {
            name: check.name().to_string(),
            status: CheckStatus::Violated,
            evidence: evidence.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CheckStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub verdict: Verdict,
    pub reason: String,
    pub target: String,
    pub strategy: Strategy,
    pub steps_used: usize,
    pub constraint_results: Vec<ConstraintResult>,
    pub final_frame: Option<String>,
    pub action_trace: String,
    pub actions: Vec<String>,
    /// sha256 over every captured frame, executed action and log line.
    pub trace_digest: String,
}

impl BehaviorReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn violated(&self) -> Vec<&str> {
        self.constraint_results
            .iter()
            .filter(|r| !r.is_ok())
            .map(|r| r.name.as_str())
            .collect()
    }

    /// Report for a session whose target never started.
    pub fn launch_failure(profile: &AppProfile, detail: &str) -> Self {
        Self {
            verdict: Verdict::Fail,
            reason: "launch".into(),
            target: format!("unavailable: {detail}"),
            strategy: choose_strategy(profile),
            steps_used: 0,
            constraint_results: Vec::new(),
            final_frame: None,
            action_trace: String::new(),
            actions: Vec::new(),
            trace_digest: String::new(),
        }
    }
}

/// One executed step with the observations on either side of it.
#[derive(Debug, Clone)]
pub struct StepEvidence {
    pub step: usize,
    pub action: ActionCommand,
    pub status: ActionStatus,
    pub before: Arc<Frame>,
    pub before_file: String,
    pub probe_before: Option<StateProbe>,
    pub after: Option<Arc<Frame>>,
    pub after_file: Option<String>,
    pub probe_after: Option<StateProbe>,
}

#[derive(Debug, Clone, Default)]
pub struct SessionEvidence {
    pub logs: Vec<LogLine>,
    pub exit: Option<TargetExit>,
    pub steps: Vec<StepEvidence>,
}

/// Evaluates every check of `profile` over the evidence collected so far.
pub fn verify_constraints(profile: &AppProfile, evidence: &SessionEvidence) -> Vec<ConstraintResult> {
    profile
        .checks()
        .into_iter()
        .map(|check| match check {
            Check::NoCrash => check_no_crash(evidence),
            Check::NoFreeze => check_no_freeze(evidence),
            Check::CollisionEndsGame => check_collision(evidence),
            Check::VisibleFeedback => check_visible_feedback(evidence),
        })
        .collect()
}

fn check_no_crash(ev: &SessionEvidence) -> ConstraintResult {
    if let Some(exit) = ev.exit.filter(TargetExit::is_crash) {
        let what = match (exit.code, exit.signal) {
            (Some(code), _) => format!("exit code {code}"),
            (None, Some(sig)) => format!("signal {sig}"),
            _ => "abnormal exit".to_string(),
        };
        return ConstraintResult::violated(Check::NoCrash, format!("target stopped: {what}"));
    }
    if let Some((i, line)) = ev.logs.iter().enumerate().find(|(_, l)| l.is_crash()) {
        return ConstraintResult::violated(Check::NoCrash, format!("playlog line {}: {line}", i + 1));
    }
    ConstraintResult::ok(Check::NoCrash, format!("no crash marker in {} log lines", ev.logs.len()))
}

fn check_no_freeze(ev: &SessionEvidence) -> ConstraintResult {
    for (j, step) in ev.steps.iter().enumerate() {
        if !step.action.is_input() || step.status != ActionStatus::Ok {
            continue;
        }
        let window: Vec<&StepEvidence> = ev.steps[j..].iter().take(FREEZE_CAPTURES).collect();
        if window.len() < FREEZE_CAPTURES {
            continue;
        }
        let frozen = window.iter().all(|s| match &s.after {
            Some(after) => diff(&step.before, after, 0).is_ok_and(|d| d.unchanged()),
            None => false,
        });
        if frozen {
            let files: Vec<&str> = window.iter().filter_map(|s| s.after_file.as_deref()).collect();
            return ConstraintResult::violated(
                Check::NoFreeze,
                format!(
                    "{} unchanged from {} after {}",
                    files.join(", "),
                    step.before_file,
                    render_action(&step.action)
                ),
            );
        }
    }
    ConstraintResult::ok(Check::NoFreeze, "every input was followed by a visible change")
}

fn check_collision(ev: &SessionEvidence) -> ConstraintResult {
    if let Some(line) = ev
        .logs
        .iter()
        .find(|l| l.event == "pipe_overlap" && l.get("alive") == Some("true"))
    {
        return ConstraintResult::violated(Check::CollisionEndsGame, format!("bird survived a pipe overlap: {line}"));
    }
    for step in &ev.steps {
        if let Some(StateProbe::Flappy {
            overlapping: true,
            alive: true,
            tick,
            ..
        }) = &step.probe_after
        {
            return ConstraintResult::violated(
                Check::CollisionEndsGame,
                format!(
                    "{} shows the bird inside a pipe at tick {tick}",
                    step.after_file.as_deref().unwrap_or("?")
                ),
            );
        }
    }
    ConstraintResult::ok(Check::CollisionEndsGame, "no pipe overlap with a live bird")
}

fn check_visible_feedback(ev: &SessionEvidence) -> ConstraintResult {
    let mut compared = 0;
    for step in &ev.steps {
        let (
            Some(StateProbe::Game2048 { grid: before, .. }),
            Some(StateProbe::Game2048 { grid: after, .. }),
            Some(frame_after),
        ) = (&step.probe_before, &step.probe_after, &step.after)
        else {
            continue;
        };
        for r in 0..4 {
            for c in 0..4 {
                let (a, b) = (before[r][c], after[r][c]);
                if a == 0 || b == 0 || a == b {
                    continue;
                }
                compared += 1;
                let unchanged = diff_region(&step.before, frame_after, glyph_rect(r, c), 0)
                    .map(|d| d.unchanged())
                    .unwrap_or(true);
                if unchanged {
                    return ConstraintResult::violated(
                        Check::VisibleFeedback,
                        format!(
                            "{}: r{}c{} changed {a} -> {b} but its number looks the same as in {}",
                            step.after_file.as_deref().unwrap_or("?"),
                            r + 1,
                            c + 1,
                            step.before_file
                        ),
                    );
                }
            }
        }
    }
    ConstraintResult::ok(
        Check::VisibleFeedback,
        format!("{compared} tile value changes all visible on screen"),
    )
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    /// Application time allowed to pass after an action before capturing.
    pub settle_seconds: f64,
    pub history_len: usize,
    pub templates: PromptTemplates,
    pub abort: AbortFlag,
    pub temperature: f64,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            settle_seconds: 1.0,
            history_len: HISTORY_LEN,
            templates: PromptTemplates::default(),
            abort: AbortFlag::new(),
            temperature: crate::llm_gateway::DEFAULT_TEMPERATURE,
        }
    }
}

struct Recorder<'a> {
    trajectory: &'a mut Trajectory,
    hasher: Sha256,
}

impl Recorder<'_> {
    fn capture<T: GuiTarget>(
        &mut self,
        observer: &mut Observer,
        target: &mut T,
        cache: &mut FrameCache,
    ) -> Result<(Arc<Frame>, String), TesterError> {
        let frame = Arc::new(observer.capture(target, None)?);
        let name = frame.file_name();
        frame.save_png(&self.trajectory.dir().join(&name))?;
        self.hasher.update(b"frame");
        self.hasher.update(frame.width.to_le_bytes());
        self.hasher.update(frame.height.to_le_bytes());
        self.hasher.update(&frame.pixels);
        cache.push(Arc::clone(&frame))?;
        self.trajectory.set_time(ObserverBackend::now_ms(target));
        self.trajectory.record(EventPayload::Screenshot { frame: name.clone() })?;
        Ok((frame, name))
    }
}

fn history_text(history: &[String], limit: usize) -> String {
    if history.is_empty() {
        return "(none yet)".to_string();
    }
    let start = history.len().saturating_sub(limit);
    history[start..]
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{}. {h}", start + i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn checks_text(results: &[ConstraintResult]) -> String {
    if results.is_empty() {
        return "(not evaluated yet)".to_string();
    }
    results
        .iter()
        .map(|r| {
            let status = if r.is_ok() { "ok" } else { "violated" };
            format!("{}: {status}", r.name)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Drives one test session against an already running target.
pub fn run_session<T: GuiTarget>(
    profile: &AppProfile,
    llm: &mut LlmSession,
    target: &mut T,
    trajectory: &mut Trajectory,
    options: &SessionOptions,
) -> Result<BehaviorReport, TesterError> {
    let strategy = choose_strategy(profile);
    let checks = profile.checks();
    let mut rec = Recorder {
        trajectory,
        hasher: Sha256::new(),
    };
    rec.trajectory.phase("behavior_test")?;
    rec.trajectory.decision(format!("strategy: {}", strategy.as_str()))?;

    let (width, height) = target.screen_size();
    let system = format!(
        "{}\n{}",
        options.templates.render(
            "gui_analysis",
            &[("width", &width.to_string()), ("height", &height.to_string())]
        )?,
        options.templates.render(
            strategy.as_str(),
            &[("name", &profile.name), ("objective", &profile.objective)]
        )?
    );
    let constraint_list = checks.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ");

    let mut observer = Observer::new();
    let mut cache = FrameCache::new();
    let mut executor = Executor::with_abort(options.abort.clone());
    let mut evidence = SessionEvidence::default();
    let mut history: Vec<String> = Vec::new();
    let mut actions: Vec<String> = Vec::new();
    let mut results: Vec<ConstraintResult> = Vec::new();

    let (mut frame, mut frame_file) = rec.capture(&mut observer, target, &mut cache)?;
    let mut probe = target.probe();
    evidence.logs.extend(target.drain_logs());

    let mut steps_used = 0;
    let mut outcome: Option<(Verdict, String)> = None;

    while steps_used < profile.step_budget {
        steps_used += 1;
        let step = steps_used;
        let prompt = options.templates.render(
            "action_decision",
            &[
                ("step", &step.to_string()),
                ("budget", &profile.step_budget.to_string()),
                ("constraints", &constraint_list),
                ("history", &history_text(&history, options.history_len)),
                ("checks", &checks_text(&results)),
            ],
        )?;
        let shown = match profile.max_image_dim {
            Some(dim) => frame.downscaled(dim),
            None => (*frame).clone(),
        };
        let image = ImageAttachment {
            name: frame_file.clone(),
            png: Arc::new(shown.encode_png()?),
        };
        let mut messages = vec![Message::system(system.clone()), Message::user(prompt).with_image(image)];

        let mut decided: Option<(ActionCommand, String)> = None;
        for attempt in 0..2 {
            let mut request = ChatRequest::new(messages.clone());
            request.temperature = options.temperature;
            let completion = llm.complete(&request, Some(rec.trajectory))?;
            let parsed = parse_action(&completion.text).map_err(|e| e.to_string()).and_then(|cmd| {
                validate_action(&cmd, target.bounds())
                    .map(|_| cmd)
                    .map_err(|e| e.to_string())
            });
            match parsed {
                Ok(cmd) => {
                    decided = Some((cmd, completion.text));
                    break;
                }
                Err(err) => {
                    rec.trajectory
                        .decision(format!("step {step}: unusable reply (attempt {}): {err}", attempt + 1))?;
                    messages.push(Message::assistant(completion.text));
                    messages.push(Message::user(format!(
                        "Your reply could not be used: {err}. Reply with exactly one action."
                    )));
                }
            }
        }
        let Some((cmd, reply)) = decided else {
            history.push("(no usable action)".to_string());
            rec.trajectory.decision(format!("step {step}: failed step"))?;
            continue;
        };

        let result = executor.execute(&cmd, target);
        let text = render_action(&cmd);
        let status = match result.status {
            ActionStatus::Ok => "ok",
            ActionStatus::Aborted => "aborted",
            ActionStatus::BackendError => "backend_error",
        };
        rec.hasher.update(text.as_bytes());
        rec.hasher.update(status.as_bytes());
        rec.trajectory.record(EventPayload::Action {
            action: text.clone(),
            status: status.to_string(),
        })?;
        actions.push(text.clone());
        history.push(format!("{text} -> {status}"));

        if let ActionCommand::Finish { outcome: o } = &cmd {
            evidence.steps.push(StepEvidence {
                step,
                action: cmd.clone(),
                status: result.status,
                before: Arc::clone(&frame),
                before_file: frame_file.clone(),
                probe_before: probe.clone(),
                after: None,
                after_file: None,
                probe_after: None,
            });
            outcome = Some(match o {
                Outcome::Success => (Verdict::Pass, "agent finished successfully".to_string()),
                Outcome::Failure => (
                    Verdict::Fail,
                    format!("agent reported failure: {}", reply.trim()),
                ),
            });
            break;
        }
        if result.status == ActionStatus::Aborted {
            outcome = Some((Verdict::Fail, "aborted".to_string()));
            break;
        }

        // Let the application settle before observing.
        if ExecutorBackend::idle(target, options.settle_seconds, &options.abort).is_err() {
            rec.trajectory.decision("settle wait failed")?;
        }
        let (after, after_file) = rec.capture(&mut observer, target, &mut cache)?;
        let probe_after = target.probe();
        for line in target.drain_logs() {
            rec.hasher.update(line.to_string().as_bytes());
            evidence.logs.push(line);
        }
        evidence.exit = target.exit_status();
        evidence.steps.push(StepEvidence {
            step,
            action: cmd,
            status: result.status,
            before: Arc::clone(&frame),
            before_file: frame_file.clone(),
            probe_before: probe.clone(),
            after: Some(Arc::clone(&after)),
            after_file: Some(after_file.clone()),
            probe_after: probe_after.clone(),
        });
        frame = after;
        frame_file = after_file;
        probe = probe_after;

        results = verify_constraints(profile, &evidence);
        if let Some(bad) = results.iter().find(|r| !r.is_ok()) {
            rec.trajectory
                .decision(format!("constraint {} violated: {}", bad.name, bad.evidence))?;
            outcome = Some((Verdict::Fail, format!("constraint violated: {}", bad.name)));
            break;
        }
    }

    let results = verify_constraints(profile, &evidence);
    let (mut verdict, mut reason) = outcome.unwrap_or((Verdict::Fail, "budget".to_string()));
    if verdict == Verdict::Pass {
        if let Some(bad) = results.iter().find(|r| !r.is_ok()) {
            verdict = Verdict::Fail;
            reason = format!("constraint violated: {}", bad.name);
        }
    }
    rec.trajectory.decision(format!(
        "verdict {}: {reason}",
        if verdict == Verdict::Pass { "pass" } else { "fail" }
    ))?;
    Ok(BehaviorReport {
        verdict,
        reason,
        target: target.label(),
        strategy,
        steps_used,
        constraint_results: results,
        final_frame: Some(frame_file),
        action_trace: crate::trajectory::TRAJECTORY_FILE.to_string(),
        actions,
        trace_digest: hex::encode(rec.hasher.finalize()),
    })
}

/// Launches the profile's target in `workdir` and runs a session, writing
/// the trajectory and frames into `session_dir`. A target that fails to
/// start yields a failing report with reason `launch`.
pub fn run_profile(
    profile: &AppProfile,
    llm: &mut LlmSession,
    workdir: &Path,
    seed: u64,
    session_dir: &Path,
    self_exe: Option<&Path>,
    options: &SessionOptions,
) -> Result<BehaviorReport, TesterError> {
    let mut trajectory = Trajectory::create(session_dir, crate::trajectory::Clock::logical())?;
    let capture_dir: PathBuf = session_dir.join("target");
    let mut target = match open_target(&profile.launch, workdir, seed, &capture_dir, self_exe) {
        Ok(t) => t,
        Err(e) => {
            trajectory.decision(format!("launch failed: {e}"))?;
            return Ok(BehaviorReport::launch_failure(profile, &e.to_string()));
        }
    };
    run_session(profile, llm, &mut target, &mut trajectory, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{MockEntry, MockScript};
    use crate::trajectory::{load, Clock};
    use crate::virtual_target::{TargetVariant, VirtualTarget};

    fn profile(variant: TargetVariant, constraints: &[&str], budget: usize) -> AppProfile {
        AppProfile {
            name: variant.id().into(),
            kind: AppKind::Game,
            objective: "exercise the game".into(),
            constraints: constraints.iter().map(|s| s.to_string()).collect(),
            launch: LaunchSpec::virtual_target(variant),
            step_budget: budget,
            max_image_dim: None,
        }
    }

    fn run(variant: TargetVariant, constraints: &[&str], budget: usize, replies: &[&str]) -> (BehaviorReport, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let p = profile(variant, constraints, budget);
        let mut llm = LlmSession::mock(MockScript::new(replies.iter().map(|r| MockEntry::reply(*r)).collect()));
        let mut target = VirtualTarget::new(variant, 7);
        let mut traj = Trajectory::create(dir.path(), Clock::logical()).unwrap();
        let report = run_session(&p, &mut llm, &mut target, &mut traj, &SessionOptions::default()).unwrap();
        (report, dir)
    }

    #[test]
    fn strategy_follows_kind() {
        let mut p = profile(TargetVariant::Game2048Ok, &[], 5);
        assert_eq!(choose_strategy(&p), Strategy::GoalDriven);
        p.kind = AppKind::Application;
        assert_eq!(choose_strategy(&p), Strategy::CoverageDriven);
    }

    #[test]
    fn passthrough_bird_is_caught() {
        let (r, _d) = run(
            TargetVariant::FlappyPassthrough,
            &["collision_ends_game"],
            10,
            &["wait(20)", "finish(\"success\")"],
        );
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.violated(), vec!["collision_ends_game"]);
        assert_eq!(r.reason, "constraint violated: collision_ends_game");
    }

    #[test]
    fn correct_bird_passes() {
        let (r, _d) = run(
            TargetVariant::FlappyOk,
            &["collision_ends_game"],
            10,
            &["wait(20)", "finish(\"success\")"],
        );
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
        assert_eq!(r.steps_used, 2);
    }

    #[test]
    fn budget_exhaustion_fails() {
        let (r, _d) = run(TargetVariant::FlappyOk, &[], 2, &["wait(1)", "wait(1)", "wait(1)"]);
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.reason, "budget");
        assert_eq!(r.steps_used, 2);
    }

    #[test]
    fn unparseable_replies_get_one_reprompt() {
        let (r, dir) = run(
            TargetVariant::FlappyOk,
            &[],
            2,
            &["I think we should wait", "wait(1)", "nonsense", "still nonsense"],
        );
        assert_eq!(r.actions, vec!["wait(1)"]);
        assert_eq!(r.steps_used, 2);
        let events = load(&dir.path().join("trajectory.jsonl")).unwrap();
        let llm_calls = events.iter().filter(|e| e.payload.kind() == "llm_call").count();
        assert_eq!(llm_calls, 4);
    }

    #[test]
    fn agent_failure_is_a_fail_verdict() {
        let (r, _d) = run(TargetVariant::Game2048Ok, &[], 3, &["finish(\"failure\")"]);
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(r.reason.starts_with("agent reported failure"));
    }

    #[test]
    fn frozen_input_is_detected() {
        // Clicking a 2048 board changes nothing on screen.
        let (r, _d) = run(
            TargetVariant::Game2048Ok,
            &[],
            6,
            &["click(10,10)", "click(20,20)", "click(30,30)", "finish(\"success\")"],
        );
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.violated(), vec!["no_freeze"]);
    }

    #[test]
    fn invisible_digits_are_caught() {
        let replies = [
            "press(\"right\")",
            "press(\"down\")",
            "press(\"left\")",
            "press(\"up\")",
            "press(\"right\")",
            "press(\"down\")",
            "finish(\"success\")",
        ];
        let (bad, _d) = run(TargetVariant::Game2048WhiteOnWhite, &["visible_feedback"], 10, &replies);
        assert_eq!(bad.verdict, Verdict::Fail);
        assert_eq!(bad.violated(), vec!["visible_feedback"]);
        let (good, _d) = run(TargetVariant::Game2048Ok, &["visible_feedback"], 10, &replies);
        assert_eq!(good.verdict, Verdict::Pass, "{good:?}");
    }

    #[test]
    fn sessions_are_reproducible() {
        let replies = ["press(\"right\")", "press(\"down\")", "press(\"left\")", "finish(\"success\")"];
        let (a, _da) = run(TargetVariant::Game2048Ok, &["visible_feedback"], 10, &replies);
        let (b, _db) = run(TargetVariant::Game2048Ok, &["visible_feedback"], 10, &replies);
        assert_eq!(a, b);
    }

    #[test]
    fn crash_marker_violates_no_crash() {
        let p = profile(TargetVariant::FlappyOk, &[], 5);
        let mut ev = SessionEvidence::default();
        assert!(verify_constraints(&p, &ev).iter().all(|r| r.is_ok()));
        ev.logs.push(LogLine::new("FATAL", "crash").field("reason", "boom"));
        let res = verify_constraints(&p, &ev);
        assert_eq!(res[0].status, CheckStatus::Violated);
        assert!(res[0].evidence.contains("playlog line 1"));
        let ev = SessionEvidence {
            exit: Some(TargetExit { code: Some(3), signal: None }),
            ..Default::default()
        };
        assert_eq!(verify_constraints(&p, &ev)[0].status, CheckStatus::Violated);
    }

    #[test]
    fn profile_parsing() {
        let text = r#"
name = "flappy"
kind = "game"
objective = "fly"
constraints = ["collision_ends_game", "no_crash"]
[launch]
virtual = "flappy_ok"
"#;
        let p = AppProfile::parse(text, "p.toml").unwrap();
        assert_eq!(p.step_budget, DEFAULT_STEP_BUDGET);
        assert_eq!(p.checks(), vec![Check::NoCrash, Check::NoFreeze, Check::CollisionEndsGame]);
        assert!(AppProfile::parse(&text.replace("no_crash", "no_lag"), "p").is_err());
        assert!(AppProfile::parse(&format!("step_budget = 0\n{text}"), "p").is_err());
    }
}
