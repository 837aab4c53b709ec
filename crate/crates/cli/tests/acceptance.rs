//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use playloop_core::action::{parse_action, render_action, ActionCommand, Direction, Key, Outcome};
use playloop_core::llm_gateway::{ChatRequest, LlmSession, Message, MockEntry, MockScript};
use playloop_core::metrics::{
    aggregate_stage, confidence_interval, efficiency_at_1_from_successes, efficiency_at_k, estimate_at_k,
    SampleOutcomes, Stage, TokenLedger,
};
use playloop_core::refiner::{apply_patch, tree_digest, ApplyError, AtomicWriter, FaultPoint, FileEdit, PatchSet};
use playloop_core::trajectory::{load, sha256_hex, token_totals, Clock, EventPayload, Trajectory};
use playloop_core::virtual_target::{slide, Grid};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn playloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_playloop"))
        .args(args)
        .output()
        .expect("playloop binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

// ---------------------------------------------------------------------------

fn estimator() -> Check {
    let start = Instant::now();
    let mut cases = 0;
    for n in 1..=10usize {
        for c in 0..=n {
            for k in 1..=n {
                let (mut hit, mut total) = (0u64, 0u64);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize == k {
                        total += 1;
                        hit += (mask & ((1u32 << c) - 1) != 0) as u64;
                    }
                }
                let want = hit as f64 / total as f64;
                let got = estimate_at_k(n, c, k).map_err(|e| e.to_string())?;
                let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
                ensure!(err <= 1e-12, "n={n} c={c} k={k}: {got} vs enumeration {want}");
                cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 1_000_000u32;
    for (n, c, k) in [(10, 3, 3), (7, 1, 2), (10, 5, 1)] {
        let p = estimate_at_k(n, c, k).map_err(|e| e.to_string())?;
        let mut pool: Vec<usize> = (0..n).collect();
        let mut hits = 0u32;
        for _ in 0..trials {
            let (drawn, _) = pool.partial_shuffle(&mut rng, k);
            hits += drawn.iter().any(|&i| i < c) as u32;
        }
        let p_hat = hits as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        ensure!(
            (p_hat - p).abs() <= 3.0 * sigma,
            "Monte Carlo n={n} c={c} k={k}: {p_hat} vs {p} (3 sigma = {})",
            3.0 * sigma
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{cases} exact cases, 3 x 1e6 trials, {:.2}s", elapsed.as_secs_f64()))
}

fn efficiency() -> Check {
    let mut notes = Vec::new();
    for (play_pct, tokens_per_problem, want) in [(4.3, 4267u64, 1.01), (8.3, 5480, 1.51)] {
        let problems = 43;
        let mut ledger = TokenLedger::new(problems);
        ledger.record("all", tokens_per_problem * problems as u64, 0);
        let eff = efficiency_at_k(play_pct / 100.0, &ledger, 1).map_err(|e| e.to_string())?;
        ensure!((eff - want).abs() <= 0.005, "Play@1 {play_pct}% at {tokens_per_problem} tokens: {eff}, want {want}");
        notes.push(format!("{eff:.4}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let records: Vec<SampleOutcomes> = (0..rng.random_range(1..40))
            .map(|i| {
                let e = rng.random_range(0..=n);
                let p = rng.random_range(0..=e);
                let y = rng.random_range(0..=p);
                SampleOutcomes::new(format!("p{i}"), n, e, p, y).unwrap()
            })
            .collect();
        let mut ledger = TokenLedger::new(records.len());
        for j in 0..rng.random_range(1..30) {
            ledger.record(format!("c{j}"), rng.random_range(1..20_000), rng.random_range(0..4_000));
        }
        let a = efficiency_at_k(aggregate_stage(&records, Stage::Play, 1).unwrap(), &ledger, 1).unwrap();
        let b = efficiency_at_1_from_successes(&records, ledger.total_tokens()).unwrap();
        ensure!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "paths disagree: {a} vs {b}");
    }
    Ok(format!("Efficiency@1 = {} ; 1000 random ledgers agree", notes.join(", ")))
}

fn gating() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for suite in 0..1000 {
        let n = rng.random_range(1..=12);
        let records: Vec<SampleOutcomes> = (0..rng.random_range(1..25))
            .map(|i| {
                let e = rng.random_range(0..=n);
                let p = rng.random_range(0..=e);
                let y = rng.random_range(0..=p);
                SampleOutcomes::new(format!("p{i}"), n, e, p, y).unwrap()
            })
            .collect();
        for k in 1..=n {
            let [exec, pass, play] = Stage::ALL.map(|s| aggregate_stage(&records, s, k).unwrap());
            ensure!(play <= pass && pass <= exec, "suite {suite} k={k}: exec {exec} pass {pass} play {play}");
        }
    }
    Ok("1000 suites ordered".into())
}

fn detection() -> Check {
    let start = Instant::now();
    let fx = fixtures();
    let mock = format!("mock:{}", fx.join("mock").display());
    let expected = [
        ("flappy_passthrough", "fail", Some("collision_ends_game")),
        ("flappy_ok", "pass", None),
        ("game2048_white_on_white", "fail", Some("visible_feedback")),
        ("game2048_ok", "pass", None),
    ];
    for (id, verdict, violated) in expected {
        let profile = fx.join("profiles").join(format!("{id}.toml"));
        let args = ["test", "--profile", profile.to_str().unwrap(), "--llm", &mock, "--seed", "7"];
        let first = playloop(&args);
        let second = playloop(&args);
        ensure!(first.stdout == second.stdout, "{id}: output differs between invocations");
        let code = first.status.code();
        let want_code = if verdict == "pass" { 0 } else { 1 };
        ensure!(
            code == Some(want_code),
            "{id}: exit {code:?}, stderr {}",
            String::from_utf8_lossy(&first.stderr)
        );
        let report: Value = serde_json::from_slice(&first.stdout).map_err(|e| format!("{id}: {e}"))?;
        ensure!(report["verdict"] == verdict, "{id}: verdict {}", report["verdict"]);
        let bad: Vec<&str> = report["constraint_results"]
            .as_array()
            .into_iter()
            .flatten()
            .filter(|c| c["status"] == "violated")
            .filter_map(|c| c["name"].as_str())
            .collect();
        ensure!(bad == violated.into_iter().collect::<Vec<_>>(), "{id}: violated {bad:?}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("4 profiles x 2 runs identical, {:.2}s", elapsed.as_secs_f64()))
}

fn repair_case(repo: &str, mock: &str) -> Result<Value, String> {
    let fx = fixtures();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let copy = work.path().join("repo");
    playloop_core::harness::copy_tree(&fx.join("repair").join(repo).join("repo"), &copy).map_err(|e| e.to_string())?;
    let out = work.path().join("out");
    let o = playloop(&[
        "repair",
        "--repo",
        copy.to_str().unwrap(),
        "--manifest",
        fx.join("repair/project.toml").to_str().unwrap(),
        "--llm",
        &format!("mock:{}", fx.join("repair").join(mock).join("mock").display()),
        "--max-iter",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    serde_json::from_str(&stdout(&o))
        .map_err(|e| format!("{repo}/{mock}: {e}; stderr {}", String::from_utf8_lossy(&o.stderr)))
}

fn repair() -> Check {
    let two = repair_case("two_stage", "two_stage")?;
    ensure!(
        two["status"] == "fixed" && two["iterations_used"] == 2,
        "two-stage: {} after {}",
        two["status"],
        two["iterations_used"]
    );
    ensure!(two["final_report"]["verdict"] == "pass", "two-stage ended without a passing report");
    let never = repair_case("two_stage", "never")?;
    ensure!(
        never["status"] == "exhausted" && never["iterations_used"] == 6,
        "never-valid: {} after {}",
        never["status"],
        never["iterations_used"]
    );
    Ok("two-stage fixed in 2, never-valid exhausted at 6".into())
}

fn atomicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rejected = 0;
    for case in 0..200 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        let names = ["a.txt", "b.txt", "sub/c.txt"];
        for name in names {
            let p = root.join(name);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            let len = rng.random_range(0..64);
            fs::write(p, (0..len).map(|_| rng.random::<u8>()).collect::<Vec<_>>()).unwrap();
        }
        let mut picked = names.to_vec();
        picked.shuffle(&mut rng);
        let mut edits: Vec<FileEdit> = picked[..2]
            .iter()
            .map(|p| FileEdit {
                path: p.to_string(),
                expected_before_hash: Some(sha256_hex(&fs::read(root.join(p)).unwrap())),
                new_content: (0..rng.random_range(0..64)).map(|_| rng.random::<u8>()).collect(),
            })
            .collect();
        let stale = rng.random_bool(0.3);
        if stale {
            edits[rng.random_range(0..2)].expected_before_hash = Some(sha256_hex(b"stale"));
        }
        let point = [FaultPoint::BeforeTemp, FaultPoint::BeforeRename, FaultPoint::AfterRename][rng.random_range(0..3)];
        let mut writer = AtomicWriter::failing(rng.random_range(0..2), point);
        let before = tree_digest(root);
        let result = apply_patch(root, &PatchSet { edits }, &mut writer);
        ensure!(result.is_err(), "case {case}: a faulted write reported success");
        if stale {
            ensure!(matches!(result, Err(ApplyError::StaleHash { .. })), "case {case}: {result:?}");
        }
        ensure!(tree_digest(root) == before, "case {case}: tree changed after {result:?}");
        rejected += 1;
    }
    Ok(format!("{rejected} faulted or stale patches left no trace"))
}

fn oracle_slide(grid: &Grid, dir: Direction) -> (Grid, u64) {
    let line = |i: usize, j: usize| match dir {
        Direction::Left => (i, j),
        Direction::Right => (i, 3 - j),
        Direction::Up => (j, i),
        Direction::Down => (3 - j, i),
    };
    let mut out = [[0; 4]; 4];
    let mut score = 0;
    for i in 0..4 {
        let tiles: Vec<u32> = (0..4).map(|j| line(i, j)).map(|(r, c)| grid[r][c]).filter(|&v| v > 0).collect();
        let mut merged = Vec::new();
        let mut j = 0;
        while j < tiles.len() {
            if j + 1 < tiles.len() && tiles[j] == tiles[j + 1] {
                merged.push(tiles[j] * 2);
                score += (tiles[j] * 2) as u64;
                j += 2;
            } else {
                merged.push(tiles[j]);
                j += 1;
            }
        }
        for (j, v) in merged.into_iter().enumerate() {
            let (r, c) = line(i, j);
            out[r][c] = v;
        }
    }
    (out, score)
}

fn game2048() -> Check {
    let mut grid = [[0; 4]; 4];
    grid[2][0] = 2;
    grid[2][3] = 2;
    grid[3][3] = 4;
    let (after, delta, _) = slide(&grid, Direction::Right);
    ensure!(after[2][3] == 4 && after[3][3] == 4 && delta == 4, "case study move gave {after:?} +{delta}");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for pos in 0..1000 {
        let mut g = [[0u32; 4]; 4];
        for v in g.iter_mut().flatten() {
            let e = rng.random_range(0..7);
            *v = if e == 0 { 0 } else { 1 << e };
        }
        for dir in Direction::ALL {
            let (got, got_delta, _) = slide(&g, dir);
            let (want, want_delta) = oracle_slide(&g, dir);
            ensure!(got == want && got_delta == want_delta, "position {pos} {dir:?}: {got:?} vs {want:?}");
        }
    }
    Ok("4000 moves match, r3c4 = 4 after right".into())
}

fn statistics() -> Check {
    let ci = confidence_interval(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.95).map_err(|e| e.to_string())?;
    ensure!((ci.mean - 3.0).abs() < 1e-12 && (ci.half_width - 1.963).abs() <= 0.001, "CI = {ci:?}");

    let fx = fixtures();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("report");
    let o = playloop(&[
        "eval",
        "--manifest",
        fx.join("bench/manifest.toml").to_str().unwrap(),
        "--llm",
        &format!("mock:{}", fx.join("bench/mock").display()),
        "--runs",
        "5",
        "--n",
        "3",
        "--k",
        "1,3",
        "--seed-base",
        "100",
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    ensure!(o.status.success(), "eval failed: {}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("samples.jsonl")).map_err(|e| e.to_string())?;
    let mut stored: Value = serde_json::from_str(text.lines().last().unwrap_or("")).map_err(|e| e.to_string())?;
    ensure!(stored["record"] == "summary", "last line is not the summary");
    stored.as_object_mut().unwrap().remove("record");
    let seeds: Vec<u64> = serde_json::from_value(stored["seeds"].clone()).map_err(|e| e.to_string())?;
    ensure!(seeds == [100, 101, 102, 103, 104], "seeds {seeds:?}");

    let t4 = 2.776_445_105_197_799;
    let series = stored["metrics"]["series"].as_array().cloned().unwrap_or_default();
    let mut names = Vec::new();
    for s in &series {
        let runs: Vec<f64> = serde_json::from_value(s["per_run"].clone()).map_err(|e| e.to_string())?;
        ensure!(runs.len() == 5, "{} has {} runs", s["name"], runs.len());
        let mean = runs.iter().sum::<f64>() / 5.0;
        let sd = (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        let (m, h) = (s["mean"].as_f64().unwrap_or(f64::NAN), s["half_width"].as_f64().unwrap_or(f64::NAN));
        ensure!((m - mean).abs() <= 1e-9 * mean.abs().max(1.0), "{} mean {m} vs {mean}", s["name"]);
        ensure!((h - t4 * sd / 5f64.sqrt()).abs() <= 1e-6 * h.abs().max(1.0), "{} half-width {h}", s["name"]);
        names.push(s["name"].as_str().unwrap_or("").to_string());
    }
    for want in ["Exec@1", "Pass@1", "Play@1", "Exec@3", "Pass@3", "Play@3", "Efficiency@1", "Efficiency@3"] {
        ensure!(names.iter().any(|n| n == want), "missing {want}");
    }
    ensure!(
        series.iter().any(|s| s["half_width"].as_f64().unwrap_or(0.0) > 0.0),
        "every interval is zero-width"
    );

    let r = playloop(&["report", "--in", out.to_str().unwrap(), "--json"]);
    ensure!(r.status.success(), "report exit {:?}: {}", r.status.code(), String::from_utf8_lossy(&r.stderr));
    let recomputed: Value = serde_json::from_str(&stdout(&r)).map_err(|e| e.to_string())?;
    ensure!(recomputed == stored, "recomputed summary differs from the stored one");
    Ok(format!("CI half-width {:.4}; {} series over 5 runs recomputed exactly", ci.half_width, series.len()))
}

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let len = rng.random_range(0..max);
    (0..len)
        .map(|_| match rng.random_range(0..6) {
            0 => rng.random::<char>(),
            1 => ['"', '\'', '\\', '\n', '\t', '\r', '(', ')', ','][rng.random_range(0..9)],
            _ => rng.random_range(' '..='~'),
        })
        .collect()
}

fn random_command(rng: &mut ChaCha8Rng, keys: &[Key]) -> ActionCommand {
    let key = |rng: &mut ChaCha8Rng| keys[rng.random_range(0..keys.len())].clone();
    match rng.random_range(0..7) {
        0 => ActionCommand::Click { x: rng.random(), y: rng.random() },
        1 => ActionCommand::Type { text: random_text(rng, 30) },
        2 => ActionCommand::Hotkey { keys: (0..rng.random_range(2..5)).map(|_| key(rng)).collect() },
        3 => ActionCommand::Press { key: key(rng) },
        4 => ActionCommand::Scroll {
            x: rng.random_range(-3000..3000),
            y: rng.random_range(-3000..3000),
            direction: Direction::ALL[rng.random_range(0..4)],
        },
        5 => {
            let seconds = if rng.random_bool(0.5) {
                rng.random_range(1..=60_000) as f64 / 1000.0
            } else {
                rng.random_range(f64::MIN_POSITIVE..=60.0)
            };
            ActionCommand::Wait { seconds }
        }
        _ => ActionCommand::Finish {
            outcome: if rng.random_bool(0.5) { Outcome::Success } else { Outcome::Failure },
        },
    }
}

fn parser() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let keys: Vec<Key> = Key::all_named().collect();
    for i in 0..10_000 {
        let cmd = random_command(&mut rng, &keys);
        let text = render_action(&cmd);
        let parsed = parse_action(&text);
        ensure!(parsed.as_ref() == Ok(&cmd), "command {i}: {text:?} parsed as {parsed:?}");
    }
    let names = ["click(", "type(", "hotkey(", "press(", "scroll(", "wait(", "finish("];
    for _ in 0..10_000 {
        let mut s = random_text(&mut rng, 40);
        if rng.random_bool(0.5) {
            let at = s.char_indices().map(|(i, _)| i).nth(rng.random_range(0..=s.chars().count().max(1) - 1)).unwrap_or(0);
            s.insert_str(at, names[rng.random_range(0..names.len())]);
        }
        let result = std::panic::catch_unwind(|| parse_action(&s));
        ensure!(result.is_ok(), "parser panicked on {s:?}");
    }
    Ok("10000 round trips, 10000 fuzz strings".into())
}

fn trajectory() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut traj = Trajectory::create(dir.path(), Clock::logical())
        .map_err(|e| e.to_string())?
        .with_sync(false);
    let script = MockScript::new(
        (0..400)
            .map(|i| {
                let mut e = MockEntry::reply(format!("step {i}: {}", random_text(&mut rng, 20)));
                e.tokens_in = Some(rng.random_range(1..4000));
                e.tokens_out = Some(rng.random_range(1..800));
                e
            })
            .collect(),
    );
    let mut llm = LlmSession::mock(script);
    let mut expected: Vec<Option<playloop_core::trajectory::TrajectoryEvent>> = Vec::new();
    let mut t = 0;
    let mut calls = 0;
    while expected.len() < 10_000 {
        t += rng.random_range(0..2000);
        traj.set_time(t);
        if calls < 400 && rng.random_range(0..25) == 0 {
            llm.complete(&ChatRequest::new(vec![Message::user(random_text(&mut rng, 50))]), Some(&mut traj))
                .map_err(|e| e.to_string())?;
            calls += 1;
            expected.push(None);
            continue;
        }
        let payload = match rng.random_range(0..5) {
            0 => EventPayload::ToolUse { tool: "search".into(), args_digest: sha256_hex(random_text(&mut rng, 10).as_bytes()) },
            1 => EventPayload::Action { action: random_text(&mut rng, 20), status: "ok".into() },
            2 => EventPayload::Screenshot { frame: format!("frame_{:06}.png", expected.len()) },
            3 => EventPayload::Phase { name: random_text(&mut rng, 12) },
            _ => EventPayload::Decision { text: random_text(&mut rng, 60) },
        };
        expected.push(Some(traj.record(payload).map_err(|e| e.to_string())?));
    }
    let loaded = load(&traj.path()).map_err(|e| e.to_string())?;
    ensure!(loaded.len() == expected.len(), "{} events loaded, {} written", loaded.len(), expected.len());
    for (i, (got, want)) in loaded.iter().zip(&expected).enumerate() {
        match want {
            Some(w) => ensure!(got == w, "event {i} differs: {got:?} vs {w:?}"),
            None => ensure!(got.payload.kind() == "llm_call", "event {i} should be an LLM call"),
        }
    }
    let ledger = llm.ledger();
    let spent = ledger.per_call().iter().fold((0, 0), |a, c| (a.0 + c.tokens_in, a.1 + c.tokens_out));
    ensure!(token_totals(&loaded) == spent, "token totals {:?} vs ledger {spent:?}", token_totals(&loaded));
    ensure!(spent.0 + spent.1 == ledger.total_tokens(), "ledger total mismatch");
    Ok(format!("{} events ({calls} LLM calls) lossless", loaded.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("estimator exactness", estimator),
        ("efficiency arithmetic", efficiency),
        ("gating monotonicity", gating),
        ("end-to-end defect detection", detection),
        ("repair convergence", repair),
        ("patch atomicity", atomicity),
        ("2048 oracle equivalence", game2048),
        ("statistical protocol", statistics),
        ("trajectory fidelity", trajectory),
        ("parser round-trip and totality", parser),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("AC{:<2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("AC{:<2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
