//! Benchmark orchestration: generate candidates per task, score them
//! through the exec -> pass -> play gates, repeat over seeded runs and
//! write a report directory that can be recomputed later.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::developer::{generate_candidates, insert_candidate, Candidate, GenerationConfig, TaskSpec};
use crate::llm_gateway::{LlmError, LlmProvider};
use crate::metrics::{
    aggregate_stage, efficiency_at_k, MetricReport, MetricsError, RunSeries, SampleOutcomes, Stage, TokenLedger,
};
use crate::refiner::{self, BehaviorCheck};
use crate::sandbox::{self, SandboxConfig};
use crate::target::LaunchSpec;
use crate::tester::{run_profile, AppProfile, BehaviorReport, SessionOptions};
use crate::trajectory::{Clock, Trajectory};

pub const DEFAULT_N: usize = 3;
pub const DEFAULT_KS: [usize; 2] = [1, 3];
pub const DEFAULT_RUNS: usize = 5;
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const REPORT_FILE: &str = "report.txt";
pub const RUN_INFO_FILE: &str = "run_info.json";
const UNIT_TEST_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("report {path}: {message}")]
    Report { path: String, message: String },
    #[error("every task was skipped")]
    NothingToEvaluate,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How to build, run, test and launch one project.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub validator_cmd: String,
    #[serde(default)]
    pub run_cmd: Option<String>,
    #[serde(default)]
    pub test_cmd: Option<String>,
    /// Overrides the profile's `[launch]` with a process command.
    #[serde(default)]
    pub launch_cmd: Option<String>,
    pub profile: PathBuf,
    /// Files shown to the repair model when diagnostics name none.
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ProjectManifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: ProjectManifest = toml::from_str(&text).map_err(|e| HarnessError::Manifest {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(m)
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.profile = base.join(&self.profile);
    }

    /// Loads the app profile, applying `launch_cmd` when set.
    pub fn app_profile(&self) -> Result<AppProfile, String> {
        let mut profile = AppProfile::load(&self.profile).map_err(|e| e.to_string())?;
        if let Some(cmd) = &self.launch_cmd {
            profile.launch = LaunchSpec {
                command: Some(cmd.clone()),
                ..LaunchSpec::default()
            };
        }
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub id: String,
    pub repo: PathBuf,
    pub target_file: PathBuf,
    pub anchor: String,
    pub function_signature: String,
    pub requirement: String,
    #[serde(flatten)]
    pub project: ProjectManifest,
}

impl BenchmarkTask {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            id: self.id.clone(),
            function_signature: self.function_signature.clone(),
            requirement: self.requirement.clone(),
            repo_root: self.repo.clone(),
            target_file: self.target_file.clone(),
            anchor: self.anchor.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub tasks: Vec<BenchmarkTask>,
}

fn default_n() -> usize {
    DEFAULT_N
}

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}

impl BenchmarkManifest {
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self, HarnessError> {
        let mut m: BenchmarkManifest = toml::from_str(text).map_err(|e| HarnessError::Manifest {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        for task in &mut m.tasks {
            task.repo = base.join(&task.repo);
            task.project.resolve_paths(base);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), &path.display().to_string())
    }

    /// Fills `seeds` from `seed_base` when the manifest gives none.
    pub fn with_seed_base(mut self, seed_base: u64) -> Self {
        if self.seeds.is_empty() {
            self.seeds = (0..self.runs as u64).map(|r| seed_base + r).collect();
        }
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("n must be at least 1".into());
        }
        if self.runs == 0 {
            return Err("runs must be at least 1".into());
        }
        if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0 || k > self.n) {
            return Err(format!("every k must satisfy 1 <= k <= n = {}", self.n));
        }
        if self.seeds.len() != self.runs {
            return Err(format!("{} seeds for {} runs", self.seeds.len(), self.runs));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err("seeds must be distinct".into());
        }
        let mut ids: Vec<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tasks.len() {
            return Err("task ids must be unique".into());
        }
        if self.tasks.is_empty() {
            return Err("no tasks".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pass,
    Fail,
}

impl StageStatus {
    fn of(ok: bool) -> Self {
        if ok {
            StageStatus::Pass
        } else {
            StageStatus::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == StageStatus::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub run: usize,
    pub seed: u64,
    pub task: String,
    pub sample: usize,
    pub exec: StageStatus,
    pub pass: StageStatus,
    pub play: StageStatus,
    /// Generation tokens spent on this candidate.
    pub tokens: u64,
    /// Play-session trajectory, relative to the report directory.
    pub trajectory: Option<String>,
    pub reason: String,
    #[serde(default)]
    pub infra: bool,
}

impl SampleRecord {
    pub fn is_gated(&self) -> bool {
        (!self.play.passed() || self.pass.passed()) && (!self.pass.passed() || self.exec.passed())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTask {
    pub id: String,
    pub reason: String,
}

/// Final line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub skipped: Vec<SkippedTask>,
    pub infra_failures: usize,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportLine {
    Sample(SampleRecord),
    Summary(Summary),
}

/// Everything a sample evaluation needs besides the candidate itself.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub provider: LlmProvider,
    pub self_exe: Option<PathBuf>,
    pub session: SessionOptions,
    pub generation: GenerationConfig,
    pub smoke_seconds: u64,
}

impl EvalContext {
    pub fn new(provider: LlmProvider) -> Self {
        Self {
            provider,
            self_exe: None,
            session: SessionOptions::default(),
            generation: GenerationConfig::default(),
            smoke_seconds: refiner::SMOKE_SECONDS,
        }
    }
}

/// Copies a tree, skipping VCS metadata and bytecode caches.
pub fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    let skip = |name: &str| matches!(name, ".git" | "__pycache__" | "target");
    let walker = WalkDir::new(src)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !skip(&e.file_name().to_string_lossy()));
    for entry in walker {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under src");
        let out = dst.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&out)?;
        } else if entry.file_type().is_file() {
            fs::copy(entry.path(), &out)?;
        }
    }
    Ok(())
}

fn run_unit_tests(workdir: &Path, cmd: &str, seed: u64, capture: &Path) -> Result<(), String> {
    let config = SandboxConfig::new(workdir, cmd, capture)
        .seed(seed)
        .timeout(UNIT_TEST_TIMEOUT);
    match sandbox::run(&config) {
        Ok(r) if r.success() => Ok(()),
        Ok(r) => Err(r.output()),
        Err(e) => Err(e.to_string()),
    }
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Scores one candidate in a fresh copy of the task repository. Later
/// stages run only when the earlier one passed; skipped stages are fails.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_sample(
    task: &BenchmarkTask,
    candidate: &Candidate,
    run: usize,
    seed: u64,
    sample_dir: &Path,
    report_root: &Path,
    ctx: &EvalContext,
) -> SampleRecord {
    let mut record = SampleRecord {
        run,
        seed,
        task: task.id.clone(),
        sample: candidate.index,
        exec: StageStatus::Fail,
        pass: StageStatus::Fail,
        play: StageStatus::Fail,
        tokens: candidate.tokens.total_tokens(),
        trajectory: None,
        reason: String::new(),
        infra: false,
    };
    let infra = |mut r: SampleRecord, msg: String| {
        r.reason = format!("infra: {msg}");
        r.infra = true;
        r
    };
    if candidate.is_empty() {
        record.reason = "empty candidate".into();
        return record;
    }
    let work = match tempfile::Builder::new().prefix("playloop-work").tempdir() {
        Ok(w) => w,
        Err(e) => return infra(record, e.to_string()),
    };
    let workdir = work.path().join("repo");
    if let Err(e) = copy_tree(&task.repo, &workdir) {
        return infra(record, format!("copy failed: {e}"));
    }
    let spec = task.spec();
    if let Err(e) = insert_candidate(&workdir, &spec, &candidate.code) {
        return infra(record, e.to_string());
    }

    let project = &task.project;
    match refiner::validate_build(&workdir, Some(&project.validator_cmd), &sample_dir.join("validate")) {
        Ok(()) => {}
        Err(refiner::BuildError::Validation(out)) => {
            record.reason = format!("compile: {}", last_line(&out));
            return record;
        }
        Err(e) => return infra(record, e.to_string()),
    }
    if let Some(cmd) = &project.run_cmd {
        if let Err(out) = refiner::smoke_run(&workdir, cmd, seed, ctx.smoke_seconds, &sample_dir.join("run")) {
            record.reason = format!("runtime: {}", last_line(&out));
            return record;
        }
    }
    record.exec = StageStatus::Pass;

    if let Some(cmd) = &project.test_cmd {
        if let Err(out) = run_unit_tests(&workdir, cmd, seed, &sample_dir.join("unit")) {
            record.reason = format!("unit tests: {}", last_line(&out));
            return record;
        }
    }
    record.pass = StageStatus::Pass;

    let profile = match project.app_profile() {
        Ok(p) => p,
        Err(e) => return infra(record, e),
    };
    let mut llm = match ctx.provider.session(&[format!("{}.test", profile.name)]) {
        Ok(s) => s,
        Err(e) => return infra(record, e.to_string()),
    };
    let play_dir = sample_dir.join("play");
    let report = run_profile(
        &profile,
        &mut llm,
        &workdir,
        seed,
        &play_dir,
        ctx.self_exe.as_deref(),
        &ctx.session,
    );
    match report {
        Ok(report) => {
            record.trajectory = Some(relative(&play_dir.join(&report.action_trace), report_root));
            record.play = StageStatus::of(report.passed());
            record.reason = if report.passed() { "ok".into() } else { report.reason };
        }
        Err(e) => return infra(record, e.to_string()),
    }
    record
}

fn last_line(s: &str) -> &str {
    s.trim().lines().last().unwrap_or("")
}

/// Why a task cannot be evaluated, if anything is missing.
fn check_fixture(task: &BenchmarkTask) -> Option<String> {
    if !task.repo.is_dir() {
        return Some(format!("repository {} not found", task.repo.display()));
    }
    if let Err(e) = task.spec().validate() {
        return Some(e.to_string());
    }
    if let Err(e) = task.project.app_profile() {
        return Some(e);
    }
    None
}

fn evaluate_task(
    task: &BenchmarkTask,
    n: usize,
    run: usize,
    seed: u64,
    out: &Path,
    ctx: &EvalContext,
) -> Result<Vec<SampleRecord>, HarnessError> {
    let task_dir = out.join("runs").join(format!("run{run}")).join(&task.id);
    let keys = [format!("{}.gen.run{run}", task.id), format!("{}.gen", task.id)];
    let mut llm = ctx.provider.session(&keys)?;
    let mut trajectory = Trajectory::create(task_dir.join("generation"), Clock::logical()).map_err(|e| HarnessError::Io {
        path: task_dir.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let spec = task.spec();
    let candidates = match generate_candidates(&spec, &mut llm, n, &ctx.generation, &mut trajectory) {
        Ok(c) => c,
        Err(e) => {
            // Generation broke down: every sample fails, flagged as infrastructure.
            let reason = format!("infra: generation failed: {e}");
            return Ok((0..n)
                .map(|i| SampleRecord {
                    run,
                    seed,
                    task: task.id.clone(),
                    sample: i,
                    exec: StageStatus::Fail,
                    pass: StageStatus::Fail,
                    play: StageStatus::Fail,
                    tokens: 0,
                    trajectory: None,
                    reason: reason.clone(),
                    infra: true,
                })
                .collect());
        }
    };
    Ok(candidates
        .iter()
        .map(|c| evaluate_sample(task, c, run, seed, &task_dir.join(format!("sample{}", c.index)), out, ctx))
        .collect())
}

/// Folds records into per-run metrics. Used both when writing a report
/// and when recomputing one, so the two agree exactly.
pub fn summarize(
    n: usize,
    ks: &[usize],
    seeds: &[u64],
    skipped: Vec<SkippedTask>,
    records: &[SampleRecord],
) -> Result<Summary, HarnessError> {
    let runs = seeds.len();
    let mut per_run: Vec<BTreeMap<&str, [usize; 3]>> = vec![BTreeMap::new(); runs];
    let mut tokens_per_run = vec![0u64; runs];
    let mut samples_seen: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); runs];
    for r in records {
        if r.run >= runs {
            return Err(HarnessError::Report {
                path: SAMPLES_FILE.into(),
                message: format!("record for run {} but only {runs} runs", r.run),
            });
        }
        let counts = per_run[r.run].entry(&r.task).or_insert([0; 3]);
        counts[0] += r.exec.passed() as usize;
        counts[1] += r.pass.passed() as usize;
        counts[2] += r.play.passed() as usize;
        *samples_seen[r.run].entry(&r.task).or_insert(0) += 1;
        tokens_per_run[r.run] += r.tokens;
    }
    let problems = per_run.first().map_or(0, |m| m.len());
    if problems == 0 {
        return Err(HarnessError::NothingToEvaluate);
    }
    let mut outcomes_per_run = Vec::with_capacity(runs);
    for (run, counts) in per_run.iter().enumerate() {
        if counts.len() != problems || samples_seen[run].values().any(|&s| s != n) {
            return Err(HarnessError::Report {
                path: SAMPLES_FILE.into(),
                message: format!("run {run} does not cover every task with {n} samples"),
            });
        }
        let outcomes = counts
            .iter()
            .map(|(task, c)| SampleOutcomes::new(*task, n, c[0], c[1], c[2]))
            .collect::<Result<Vec<_>, _>>()?;
        outcomes_per_run.push(outcomes);
    }

    let mut series = Vec::new();
    for &k in ks {
        for stage in Stage::ALL {
            let values = outcomes_per_run
                .iter()
                .map(|o| aggregate_stage(o, stage, k))
                .collect::<Result<Vec<_>, _>>()?;
            series.push(RunSeries::from_runs(MetricReport::stage_key(stage, k), values)?);
        }
    }
    for &k in ks {
        let mut values = Vec::with_capacity(runs);
        for (run, outcomes) in outcomes_per_run.iter().enumerate() {
            let mut ledger = TokenLedger::new(problems);
            ledger.record(format!("run{run}"), tokens_per_run[run], 0);
            values.push(efficiency_at_k(aggregate_stage(outcomes, Stage::Play, k)?, &ledger, k)?);
        }
        series.push(RunSeries::from_runs(MetricReport::efficiency_key(k), values)?);
    }
    Ok(Summary {
        seeds: seeds.to_vec(),
        skipped,
        infra_failures: records.iter().filter(|r| r.infra).count(),
        metrics: MetricReport {
            n,
            ks: ks.to_vec(),
            runs,
            problems,
            tokens_per_run,
            series,
        },
    })
}

/// Human-readable report text.
pub fn render_report(summary: &Summary) -> String {
    let mut text = summary.metrics.to_text();
    text.push_str(&format!(
        "seeds = {}\n",
        summary.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    ));
    text.push_str(&format!("infra_failures = {}\n", summary.infra_failures));
    for s in &summary.skipped {
        text.push_str(&format!("skipped = {}: {}\n", s.id, s.reason));
    }
    text
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub records: Vec<SampleRecord>,
    pub summary: Summary,
}

/// Runs every task over every seeded run and writes the report directory.
pub fn run_benchmark(
    manifest: &BenchmarkManifest,
    ctx: &EvalContext,
    out: &Path,
    jobs: usize,
) -> Result<BenchmarkResult, HarnessError> {
    manifest.validate().map_err(|message| HarnessError::Manifest {
        path: "manifest".into(),
        message,
    })?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let started = unix_seconds();

    let mut skipped = Vec::new();
    let mut active = Vec::new();
    for task in &manifest.tasks {
        match check_fixture(task) {
            Some(reason) => skipped.push(SkippedTask {
                id: task.id.clone(),
                reason,
            }),
            None => active.push(task),
        }
    }
    if active.is_empty() {
        return Err(HarnessError::NothingToEvaluate);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Io {
            path: "thread pool".into(),
            source: std::io::Error::other(e),
        })?;
    let mut records = Vec::new();
    for (run, &seed) in manifest.seeds.iter().enumerate() {
        let per_task: Vec<Result<Vec<SampleRecord>, HarnessError>> = pool.install(|| {
            use rayon::prelude::*;
            active
                .par_iter()
                .map(|task| evaluate_task(task, manifest.n, run, seed, out, ctx))
                .collect()
        });
        for r in per_task {
            records.extend(r?);
        }
    }
    debug_assert!(records.iter().all(SampleRecord::is_gated));

    let summary = summarize(manifest.n, &manifest.ks, &manifest.seeds, skipped, &records)?;
    write_report(out, &records, &summary)?;
    let info = serde_json::json!({
        "started_unix": started,
        "finished_unix": unix_seconds(),
        "jobs": jobs,
    });
    let info_path = out.join(RUN_INFO_FILE);
    fs::write(&info_path, format!("{info:#}\n")).map_err(io_err(&info_path))?;
    Ok(BenchmarkResult { records, summary })
}

fn unix_seconds() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn summary_line(summary: &Summary) -> String {
    serde_json::to_string(&ReportLine::Summary(summary.clone())).expect("summary serializes")
}

pub fn write_report(out: &Path, records: &[SampleRecord], summary: &Summary) -> Result<(), HarnessError> {
    let path = out.join(SAMPLES_FILE);
    let mut file = fs::File::create(&path).map_err(io_err(&path))?;
    for r in records {
        let line = serde_json::to_string(&ReportLine::Sample(r.clone())).expect("record serializes");
        writeln!(file, "{line}").map_err(io_err(&path))?;
    }
    writeln!(file, "{}", summary_line(summary)).map_err(io_err(&path))?;
    let text_path = out.join(REPORT_FILE);
    fs::write(&text_path, render_report(summary)).map_err(io_err(&text_path))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recomputed {
    pub stored: Summary,
    pub recomputed: Summary,
    /// The re-serialized summary line equals the stored one byte for byte.
    pub matches: bool,
}

/// Reads a report directory and recomputes the summary from its samples.
pub fn recompute_report(dir: &Path) -> Result<Recomputed, HarnessError> {
    let path = dir.join(SAMPLES_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |line: usize, message: String| HarnessError::Report {
        path: path.display().to_string(),
        message: format!("line {line}: {message}"),
    };
    let mut records = Vec::new();
    let mut stored = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str::<ReportLine>(line).map_err(|e| bad(i + 1, e.to_string()))? {
            ReportLine::Sample(r) => {
                if stored.is_some() {
                    return Err(bad(i + 1, "sample after summary".into()));
                }
                records.push(r);
            }
            ReportLine::Summary(s) => stored = Some((s, line.to_string())),
        }
    }
    let (stored, stored_line) = stored.ok_or_else(|| bad(0, "no summary record".into()))?;
    let recomputed = summarize(
        stored.metrics.n,
        &stored.metrics.ks,
        &stored.seeds,
        stored.skipped.clone(),
        &records,
    )?;
    let matches = summary_line(&recomputed) == stored_line;
    Ok(Recomputed {
        stored,
        recomputed,
        matches,
    })
}

/// Re-runs a profile's tester session after each repair iteration.
pub struct ProfileCheck {
    pub profile: AppProfile,
    pub provider: LlmProvider,
    pub seed: u64,
    pub session_root: PathBuf,
    pub self_exe: Option<PathBuf>,
    pub options: SessionOptions,
}

impl ProfileCheck {
    pub fn session_keys(&self, iteration: usize) -> Vec<String> {
        vec![
            format!("{}.test.iter{iteration}", self.profile.name),
            format!("{}.test", self.profile.name),
        ]
    }
}

impl BehaviorCheck for ProfileCheck {
    fn evaluate(&mut self, repo_root: &Path, iteration: usize) -> Result<BehaviorReport, String> {
        let mut llm = self
            .provider
            .session(&self.session_keys(iteration))
            .map_err(|e| e.to_string())?;
        run_profile(
            &self.profile,
            &mut llm,
            repo_root,
            self.seed,
            &self.session_root.join(format!("iter{iteration}")),
            self.self_exe.as_deref(),
            &self.options,
        )
        .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(run: usize, task: &str, sample: usize, stages: [bool; 3], tokens: u64) -> SampleRecord {
        SampleRecord {
            run,
            seed: 100 + run as u64,
            task: task.into(),
            sample,
            exec: StageStatus::of(stages[0]),
            pass: StageStatus::of(stages[1]),
            play: StageStatus::of(stages[2]),
            tokens,
            trajectory: None,
            reason: String::new(),
            infra: false,
        }
    }

    #[test]
    fn all_pass_suite_has_zero_width() {
        let records: Vec<_> = (0..3)
            .flat_map(|run| (0..3).map(move |s| rec(run, "t", s, [true; 3], 1000)))
            .collect();
        let s = summarize(3, &[1, 3], &[1, 2, 3], vec![], &records).unwrap();
        for k in [1, 3] {
            for stage in Stage::ALL {
                let series = s.metrics.get(&MetricReport::stage_key(stage, k)).unwrap();
                assert_eq!(series.mean, 1.0);
                assert_eq!(series.half_width, 0.0);
            }
        }
        // 100% over 3000 tokens / (1 problem * 1000).
        assert!((s.metrics.get("Efficiency@1").unwrap().mean - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn half_the_tasks_reach_play() {
        let mut records: Vec<_> = (0..3).map(|s| rec(0, "a", s, [true; 3], 10)).collect();
        records.extend((0..3).map(|s| rec(0, "b", s, [true, true, false], 10)));
        let s = summarize(3, &[1], &[9], vec![], &records).unwrap();
        assert_eq!(s.metrics.get("Play@1").unwrap().mean, 0.5);
        assert_eq!(s.metrics.get("Pass@1").unwrap().mean, 1.0);
        assert_eq!(s.metrics.problems, 2);
    }

    #[test]
    fn summarize_rejects_incomplete_runs() {
        let records = vec![rec(0, "a", 0, [true; 3], 1)];
        assert!(summarize(3, &[1], &[1], vec![], &records).is_err());
        assert!(matches!(summarize(3, &[1], &[1], vec![], &[]), Err(HarnessError::NothingToEvaluate)));
    }

    #[test]
    fn report_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..2)
            .flat_map(|run| (0..3).map(move |s| rec(run, "t", s, [true, s > 0, s > run], 700 + s as u64)))
            .collect();
        let summary = summarize(3, &[1, 3], &[5, 6], vec![], &records).unwrap();
        write_report(dir.path(), &records, &summary).unwrap();
        let again = recompute_report(dir.path()).unwrap();
        assert!(again.matches);
        assert_eq!(again.recomputed, summary);
    }

    #[test]
    fn tampered_report_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..3).map(|s| rec(0, "t", s, [true, true, s == 0], 50)).collect();
        let summary = summarize(3, &[1], &[1], vec![], &records).unwrap();
        write_report(dir.path(), &records, &summary).unwrap();
        let path = dir.path().join(SAMPLES_FILE);
        let text = fs::read_to_string(&path).unwrap().replacen("\"tokens\":50", "\"tokens\":51", 1);
        fs::write(&path, text).unwrap();
        assert!(!recompute_report(dir.path()).unwrap().matches);
    }

    #[test]
    fn manifest_defaults_and_validation() {
        let text = r#"
            [[tasks]]
            id = "t"
            repo = "repo"
            target_file = "game.py"
            anchor = "f"
            function_signature = "def f():"
            requirement = "do it"
            validator_cmd = "true"
            profile = "p.toml"
        "#;
        let m = BenchmarkManifest::parse(text, Path::new("/base"), "m").unwrap().with_seed_base(10);
        assert_eq!((m.n, m.ks.clone(), m.runs), (3, vec![1, 3], 5));
        assert_eq!(m.seeds, vec![10, 11, 12, 13, 14]);
        assert_eq!(m.tasks[0].repo, Path::new("/base/repo"));
        assert_eq!(m.tasks[0].project.profile, Path::new("/base/p.toml"));
        m.validate().unwrap();

        let mut dup = m.clone();
        dup.seeds[1] = 10;
        assert!(dup.validate().is_err());
        let mut big_k = m.clone();
        big_k.ks = vec![4];
        assert!(big_k.validate().is_err());
    }

    #[test]
    fn copy_skips_caches() {
        let src = tempfile::tempdir().unwrap();
        fs::create_dir_all(src.path().join("__pycache__")).unwrap();
        fs::write(src.path().join("__pycache__/x.pyc"), "x").unwrap();
        fs::create_dir_all(src.path().join("pkg")).unwrap();
        fs::write(src.path().join("pkg/a.py"), "a").unwrap();
        let dst = tempfile::tempdir().unwrap();
        copy_tree(src.path(), &dst.path().join("c")).unwrap();
        assert!(dst.path().join("c/pkg/a.py").is_file());
        assert!(!dst.path().join("c/__pycache__").exists());
    }
}
