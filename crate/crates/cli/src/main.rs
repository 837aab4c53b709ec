use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use playloop_core::harness::{self, BenchmarkManifest, EvalContext, ProfileCheck, ProjectManifest};
use playloop_core::llm_gateway::LlmProvider;
use playloop_core::refiner::{self, RefinerConfig, RepairStatus};
use playloop_core::sandbox::SEED_VAR;
use playloop_core::target::{self, HANDSHAKE_VAR};
use playloop_core::tester::{run_profile, AppProfile, SessionOptions};
use playloop_core::trajectory::{Clock, Trajectory};
use playloop_core::virtual_target::TargetVariant;

#[derive(Parser)]
#[command(name = "playloop", version, about = "Behavioral testing, scoring and repair of GUI programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, gate and score candidates for every task in a manifest.
    Eval(EvalArgs),
    /// Run one tester session against a profile and print the report.
    Test(TestArgs),
    /// Repair a repository until its behavior checks pass.
    Repair(RepairArgs),
    /// Recompute metrics from a stored report directory.
    Report(ReportArgs),
    /// Serve a virtual target over stdin/stdout.
    Fixtures(FixturesArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `mock:<file-or-dir>` or an OpenAI-compatible base URL.
    #[arg(long)]
    llm: String,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    llm: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Working directory for the target; defaults to the profile's directory.
    #[arg(long)]
    repo: Option<PathBuf>,
    /// Keep the trajectory and frames here instead of a temporary directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RepairArgs {
    #[arg(long)]
    repo: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    llm: String,
    #[arg(long, default_value_t = refiner::MAX_ITERATIONS)]
    max_iter: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the trajectory and per-iteration captures.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Print the recomputed summary as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    target: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    handshake: Option<PathBuf>,
}

/// Exit 1 means the harness worked and the code under test failed.
const FOUND_FAILURE: u8 = 1;
const BROKEN: u8 = 2;

type CliResult = Result<u8, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => eval(a),
        Command::Test(a) => test(a),
        Command::Repair(a) => repair(a),
        Command::Report(a) => report(a),
        Command::Fixtures(a) => fixtures(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("playloop: {message}");
            ExitCode::from(BROKEN)
        }
    }
}

fn provider(spec: &str) -> Result<LlmProvider, String> {
    LlmProvider::from_spec(spec).map_err(|e| e.to_string())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn eval(a: EvalArgs) -> CliResult {
    let mut manifest = BenchmarkManifest::load(&a.manifest).map_err(|e| e.to_string())?;
    if let Some(n) = a.n {
        manifest.n = n;
    }
    if let Some(ks) = a.k {
        manifest.ks = ks;
    }
    if let Some(runs) = a.runs {
        if runs != manifest.runs {
            manifest.seeds.clear();
        }
        manifest.runs = runs;
    }
    if let Some(base) = a.seed_base {
        manifest.seeds.clear();
        manifest = manifest.with_seed_base(base);
    }
    let manifest = manifest.with_seed_base(0);
    let mut ctx = EvalContext::new(provider(&a.llm)?);
    ctx.self_exe = std::env::current_exe().ok();
    let result = harness::run_benchmark(&manifest, &ctx, &a.out, a.jobs).map_err(|e| e.to_string())?;
    print!("{}", harness::render_report(&result.summary));
    println!("report written to {}", a.out.display());
    Ok(0)
}

fn test(a: TestArgs) -> CliResult {
    let profile = AppProfile::load(&a.profile).map_err(|e| e.to_string())?;
    let llm_provider = provider(&a.llm)?;
    let mut llm = llm_provider
        .session(&[format!("{}.test", profile.name)])
        .map_err(|e| e.to_string())?;
    let workdir = match a.repo {
        Some(r) => r,
        None => a.profile.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let scratch;
    let session_dir = match a.out {
        Some(dir) => dir,
        None => {
            scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
            scratch.path().to_path_buf()
        }
    };
    let exe = std::env::current_exe().ok();
    let report = run_profile(
        &profile,
        &mut llm,
        &workdir,
        a.seed,
        &session_dir,
        exe.as_deref(),
        &SessionOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    println!("{}", to_json(&report));
    Ok(if report.passed() { 0 } else { FOUND_FAILURE })
}

fn repair(a: RepairArgs) -> CliResult {
    let project = ProjectManifest::load(&a.manifest).map_err(|e| e.to_string())?;
    let profile = project.app_profile()?;
    let llm_provider = provider(&a.llm)?;
    let seed = a.seed.or(project.seed).unwrap_or(0);
    let out = a.out.unwrap_or_else(|| PathBuf::from("playloop-repair"));
    let self_exe = std::env::current_exe().ok();

    let mut config = RefinerConfig::new(out.join("work"));
    config.max_iterations = a.max_iter;
    config.validator_cmd = Some(project.validator_cmd.clone());
    config.run_cmd = project.run_cmd.clone();
    config.seed = seed;
    config.propose.fallback_files = project.files.clone();
    config.validate().map_err(|e| e.to_string())?;

    let mut check = ProfileCheck {
        profile: profile.clone(),
        provider: llm_provider.clone(),
        seed,
        session_root: out.join("sessions"),
        self_exe,
        options: SessionOptions::default(),
    };

    // Establish the starting failure the same way each iteration is judged.
    let initial_dir = out.join("work").join("iter0");
    let compile = match refiner::validate_build(&a.repo, Some(&project.validator_cmd), &initial_dir.join("validate")) {
        Ok(()) => String::new(),
        Err(e) => e.to_string(),
    };
    let runtime = match (&project.run_cmd, compile.is_empty()) {
        (Some(cmd), true) => refiner::smoke_run(&a.repo, cmd, seed, config.smoke_seconds, &initial_dir.join("run"))
            .err()
            .unwrap_or_default(),
        _ => String::new(),
    };
    let behavior = if compile.is_empty() && runtime.is_empty() {
        use refiner::BehaviorCheck;
        Some(check.evaluate(&a.repo, 0)?)
    } else {
        None
    };
    let initial = match refiner::diagnose(&compile, &runtime, behavior.as_ref()) {
        Ok(summary) => summary,
        Err(refiner::RefinerError::NothingToDiagnose) => {
            println!("{}", serde_json::json!({"status": "fixed", "iterations_used": 0}));
            return Ok(0);
        }
        Err(e) => return Err(e.to_string()),
    };

    let mut llm = llm_provider
        .session(&[format!("{}.repair", profile.name), "repair".to_string()])
        .map_err(|e| e.to_string())?;
    let mut trajectory = Trajectory::create(&out, Clock::logical()).map_err(|e| e.to_string())?;
    let outcome = refiner::repair_loop(&a.repo, initial, &mut llm, &mut check, &config, &mut trajectory)
        .map_err(|e| e.to_string())?;
    println!("{}", to_json(&outcome));
    Ok(match outcome.status {
        RepairStatus::Fixed => 0,
        RepairStatus::Exhausted => FOUND_FAILURE,
    })
}

fn report(a: ReportArgs) -> CliResult {
    let r = harness::recompute_report(&a.input).map_err(|e| e.to_string())?;
    if a.json {
        println!("{}", to_json(&r.recomputed));
    } else {
        print!("{}", harness::render_report(&r.recomputed));
    }
    if !r.matches {
        return Err("recomputed summary differs from the stored summary".into());
    }
    Ok(0)
}

fn fixtures(a: FixturesArgs) -> CliResult {
    let variant: TargetVariant = a.target.parse().map_err(|e| format!("{e}"))?;
    let seed = match a.seed {
        Some(s) => s,
        None => std::env::var(SEED_VAR)
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0),
    };
    let dir = a
        .handshake
        .or_else(|| std::env::var_os(HANDSHAKE_VAR).map(PathBuf::from))
        .ok_or_else(|| format!("no handshake directory: pass --handshake or set {HANDSHAKE_VAR}"))?;
    let stdin = std::io::stdin().lock();
    target::serve(variant, seed, &dir, stdin, std::io::stdout().lock(), std::io::stderr().lock())
        .map_err(|e| e.to_string())?;
    Ok(0)
}
