//! Acceptance run: one [PASS]/[FAIL] line per criterion, offline, replay
//! backend only. Exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};

use cbl_core::harness::{AblationReport, EvalReport};
use cbl_core::memory::MemoryBank;
use cbl_core::runtime::{FixtureRecord, ReplayBackend, RunOptions};
use cbl_core::testkit::{
    arb_bank, arb_cases, check_ablation_correspondence, check_cross_agent_identity,
    check_curriculum, check_strategy_purity, check_transfer,
};
use cbl_core::transfer::{import_bundle, TransferError};
use cbl_core::update::{ExecutionTrace, ExperienceUpdater, FailureKind};
use cbl_core::{classify_failures, run_case_loop, Strategy, Suite};

/// Tolerance on reported means.
const MEAN_TOL: f64 = 1e-3;
/// Tolerance on the global time and token means.
const GLOBAL_TOL: f64 = 0.1;
const MAX_EVAL_TIME: Duration = Duration::from_secs(30);
const BANK_CASES: u32 = 128;
const CURRICULUM_CASES: u32 = 1000;
const SCHEMA_PHRASE: &str = "field formats should be rechecked";

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn suite() -> Suite {
    Suite::load(data().join("suite.json")).expect("suite loads")
}

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn cbl(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cbl"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "cbl {} exited {:?}: {}",
            args[0],
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Runs `eval-all` over the main fixtures into a new run directory.
fn eval_all_cli(out: &Path) -> Result<(PathBuf, Duration), String> {
    let start = Instant::now();
    cbl(&[
        "eval-all",
        "--suite",
        &path(&data().join("suite.json")),
        "--backend",
        &format!("replay={}", path(&data().join("fixtures/main"))),
        "--out",
        &path(out),
    ])?;
    let elapsed = start.elapsed();
    let mut runs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    runs.sort();
    Ok((runs.pop().ok_or("no run directory")?, elapsed))
}

fn fixture_means(label: &str, task: &str) -> (f64, f64) {
    let text = fs::read_to_string(data().join(format!("fixtures/main/{label}.json"))).unwrap();
    let records: BTreeMap<String, FixtureRecord> = serde_json::from_str(&text).unwrap();
    let rows: Vec<&FixtureRecord> = records
        .iter()
        .filter(|(id, _)| id.starts_with(&format!("{task}/")))
        .map(|(_, r)| r)
        .collect();
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.latency_ms as f64).sum::<f64>() / n,
        rows.iter().map(|r| (r.tokens_in + r.tokens_out) as f64).sum::<f64>() / n,
    )
}

fn main_table(out: &Path) -> Verdict {
    let (dir, elapsed) = eval_all_cli(out)?;
    let report = EvalReport::from_json(&fs::read_to_string(dir.join("report.json")).unwrap())
        .map_err(|e| e.to_string())?;
    report.check().map_err(|e| e.to_string())?;
    // (task, best score mean, best success count of 15, delta score, delta success)
    let expected = [
        ("tool_orchestration", 3.6, 15, 0.4, 0.0),
        ("rlhf_training", 3.8, 15, 0.2, 0.0),
        ("enterprise_rag", 2.333, 8, 1.667, 0.467),
        ("long_horizon_ops", 2.2, 9, 1.8, 0.4),
        ("preference_drift", 2.667, 12, 1.333, 0.2),
        ("multiagent_discovery", 1.333, 4, 2.667, 0.733),
    ];
    let cmp = report.comparison.as_ref().ok_or("no comparison")?;
    for (task, best_mean, best_ok, d_score, d_succ) in expected {
        let row = report.row(Strategy::Cbl, task).ok_or(format!("no cbl row for {task}"))?;
        ensure(row.metrics.score_total == 60 && row.metrics.success_count == 15, || {
            format!("{task}: cbl {}/{}", row.metrics.score_mean, row.metrics.success_rate)
        })?;
        let best = &report.best_baseline[task];
        let best_row = report.row(best.method, task).unwrap();
        ensure(close(best.score_mean, best_mean, MEAN_TOL), || {
            format!("{task}: best baseline mean {} != {best_mean}", best.score_mean)
        })?;
        ensure(best_row.metrics.success_count == best_ok, || {
            format!("{task}: best baseline successes {} != {best_ok}", best_row.metrics.success_count)
        })?;
        let d = cmp.delta(task).ok_or(format!("no delta for {task}"))?;
        ensure(close(d.delta_score, d_score, MEAN_TOL) && close(d.delta_success, d_succ, MEAN_TOL), || {
            format!("{task}: delta ({:+.3}, {:+.3})", d.delta_score, d.delta_success)
        })?;
        for r in report.rows.iter().filter(|r| r.task == task) {
            let (time, tokens) = fixture_means(r.method.slug(), task);
            ensure(
                close(r.metrics.mean_time_ms, time, 1e-9) && close(r.metrics.mean_tokens, tokens, 1e-9),
                || format!("{task}/{}: cost means disagree with fixtures", r.method),
            )?;
        }
    }
    let g = &report.global["cbl"];
    ensure(
        close(g.mean_time_ms, 25_507.6, GLOBAL_TOL) && close(g.mean_tokens, 129_049.9, GLOBAL_TOL),
        || format!("global means {} ms / {} tokens", g.mean_time_ms, g.mean_tokens),
    )?;
    ensure(elapsed < MAX_EVAL_TIME, || format!("eval-all took {elapsed:?}"))?;
    Ok(format!(
        "6 tasks, global {:.1} ms / {:.1} tokens, eval-all {:.2}s",
        g.mean_time_ms,
        g.mean_tokens,
        elapsed.as_secs_f64()
    ))
}

fn ablation(out: &Path) -> Verdict {
    cbl(&[
        "ablate",
        "--suite",
        &path(&data().join("suite.json")),
        "--backend",
        &format!("replay={}", path(&data().join("fixtures/ablation"))),
        "--bundle",
        &path(&data().join("bundles/research-agent.bundle.json")),
        "--out",
        &path(out),
    ])?;
    let text = fs::read_to_string(out.join("run-0001/ablation.json")).map_err(|e| e.to_string())?;
    let report: AblationReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    report.check().map_err(|e| e.to_string())?;
    let expected = [
        ("drop-fact", 3.0),
        ("drop-constraint", 3.3),
        ("drop-skill", 3.4),
        ("drop-curriculum", 3.2),
        ("rule-memory", 2.9),
    ];
    for (label, mean) in expected {
        let c = report.condition(label).ok_or(format!("no condition {label}"))?;
        ensure(close(c.score_mean, mean, MEAN_TOL), || format!("{label}: {}", c.score_mean))?;
    }
    let drop_fact = report.condition("drop-fact").unwrap();
    ensure(close(drop_fact.success_rate, 0.9, MEAN_TOL), || {
        format!("drop-fact success {}", drop_fact.success_rate)
    })?;
    let rates = &drop_fact.signal_trigger_rates;
    ensure(rates.get("avoid_premature_tuning") == Some(&0.2), || {
        format!("avoid_premature_tuning {:?}", rates.get("avoid_premature_tuning"))
    })?;
    ensure(rates.get("termination") == Some(&0.8), || {
        format!("termination {:?}", rates.get("termination"))
    })?;
    Ok("drop-fact 3.0/0.9, signals 0.2/0.8; 3.3, 3.4, 3.2, 2.9".into())
}

fn golden(kind: &FailureKind) -> ExecutionTrace {
    let p = data().join("traces").join(format!("{}.json", kind.slug()));
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn phi_coverage() -> Verdict {
    let suite = suite();
    let updater = ExperienceUpdater::from_suite(&suite);
    for kind in FailureKind::NAMED {
        let trace = golden(&kind);
        let task = suite.task(&trace.task_category).map_err(|e| e.to_string())?;
        let got: Vec<FailureKind> = classify_failures(&trace, task.deadline_ms)
            .into_iter()
            .map(|d| d.kind)
            .collect();
        ensure(got == vec![kind.clone()], || format!("{}: classified {got:?}", kind.slug()))?;
    }
    let schema = golden(&FailureKind::SchemaValidationFailure);
    let task = suite.task(&schema.task_category).unwrap();
    let rule = updater.synthesize_constraint(&FailureKind::SchemaValidationFailure, &task.category_id, "x", 0);
    ensure(rule.text.contains(SCHEMA_PHRASE), || format!("schema rule: {}", rule.text))?;
    let mut bank = MemoryBank::new("phi");
    for i in 0..10u64 {
        let mut t = schema.clone();
        t.case_id = format!("phi/{}/r1v{i}", task.category_id);
        t.started_at = i;
        let score = cbl_core::score_sample(task, &t, &updater.detectors);
        bank = updater.apply(&bank, task, &t, &score).map_err(|e| e.to_string())?.0;
    }
    ensure(bank.constraints.len() == 1, || format!("{} constraints after 10 traces", bank.constraints.len()))?;
    Ok("5 golden traces classified exactly; 10 schema failures -> 1 rule".into())
}

fn learning_increment() -> Verdict {
    let suite = suite();
    let task = suite.task("tool_orchestration").unwrap();
    // Same variant in two rounds: identical task text, distinct samples.
    let samples = vec![task.sample(1, 1), task.sample(2, 1)];
    let record = |text: &str| FixtureRecord {
        text: text.into(),
        tokens_in: 10,
        tokens_out: 10,
        latency_ms: 100,
        error: None,
    };
    let records = BTreeMap::from([
        (samples[0].sample_id.clone(), record("The agent loops; add an explicit stop rule.")),
        (samples[1].sample_id.clone(), record("Remediation plan: explicit stop rule.")),
    ]);
    let backend = ReplayBackend::new("scripted", records);
    let updater = ExperienceUpdater::from_suite(&suite);
    let options = RunOptions::default();
    let bank = suite.seed_bank("learner");
    let rule = updater
        .synthesize_constraint(&FailureKind::SchemaValidationFailure, &task.category_id, "", 0)
        .text;

    let cbl = run_case_loop(&bank, task, &samples, Strategy::Cbl, &backend, &updater, &options)
        .map_err(|e| e.to_string())?;
    ensure(!cbl.is_partial(), || "case loop halted".into())?;
    ensure(
        cbl.steps[0].delta.failures == vec![FailureKind::SchemaValidationFailure],
        || format!("sample 1 failures {:?}", cbl.steps[0].delta.failures),
    )?;
    let p1 = cbl.steps[0].trace.prompt().unwrap_or_default();
    let p2 = cbl.steps[1].trace.prompt().unwrap_or_default();
    ensure(!p1.contains(&rule) && p2.contains(&rule), || "rule not learned into sample 2".into())?;

    let zs = run_case_loop(&bank, task, &samples, Strategy::ZeroShot, &backend, &updater, &options)
        .map_err(|e| e.to_string())?;
    let z1 = zs.steps[0].trace.prompt().unwrap_or_default();
    let z2 = zs.steps[1].trace.prompt().unwrap_or_default();
    ensure(z1 == z2, || "zero-shot contexts differ".into())?;
    Ok("cbl sample 2 carries the schema rule; zero-shot contexts identical".into())
}

fn run_props<S, F>(cases: u32, strategy: S, check: F) -> Result<u32, String>
where
    S: proptest::strategy::Strategy,
    F: Fn(&S::Value) -> Result<(), String>,
{
    let mut runner = TestRunner::new(Config {
        cases,
        ..Config::default()
    });
    for _ in 0..cases {
        let value = strategy
            .new_tree(&mut runner)
            .map_err(|e| e.to_string())?
            .current();
        check(&value)?;
    }
    Ok(cases)
}

fn strategy_purity() -> Verdict {
    let suite = suite();
    let n = run_props(
        BANK_CASES,
        (arb_bank(), 0usize..6, 1u32..=5),
        |(bank, t, v)| {
            let task = &suite.tasks[*t];
            let sample = task.sample(1, *v);
            check_strategy_purity(bank, task, &sample)?;
            check_ablation_correspondence(bank, task, &sample)
        },
    )?;
    Ok(format!("{n} random banks, 5 strategies, 4 ablations each"))
}

fn transfer() -> Verdict {
    let suite = suite();
    let doc = fs::read_to_string(data().join("bundles/research-agent.bundle.json")).unwrap();
    let a = import_bundle(&doc, "agent-a", &BTreeSet::new(), None).map_err(|e| e.to_string())?;
    check_transfer(&a, &BTreeSet::new())?;
    let tasks: Vec<_> = suite.tasks.iter().collect();
    let compared = check_cross_agent_identity(&a, &tasks, suite.budget_chars)?;
    ensure(compared == 30, || format!("compared {compared} contexts"))?;
    let tampered = doc.replacen("\"score\": 4,", "\"score\": 3,", 1);
    ensure(tampered != doc, || "tamper edit did not apply".into())?;
    match import_bundle(&tampered, "agent-b", &BTreeSet::new(), None) {
        Err(TransferError::HashMismatch { .. }) => {}
        other => return Err(format!("tampered bundle gave {other:?}")),
    }
    Ok("round trip equal; 6 tasks x 5 variants identical; tamper -> HashMismatch".into())
}

fn determinism(out: &Path) -> Verdict {
    let (first, _) = eval_all_cli(out)?;
    let (second, _) = eval_all_cli(out)?;
    ensure(first != second, || "runs share a directory".into())?;
    for file in ["report.json", "report.txt"] {
        let a = fs::read(first.join(file)).map_err(|e| e.to_string())?;
        let b = fs::read(second.join(file)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{file} differs between runs"))?;
    }
    Ok("two eval-all runs byte-identical".into())
}

fn curriculum() -> Verdict {
    let n = run_props(
        CURRICULUM_CASES,
        (arb_cases(0..24), proptest::collection::vec(0usize..2_000, 1..6)),
        |(cases, budgets)| check_curriculum(cases, budgets),
    )?;
    Ok(format!("{n} random case lists"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = |name: &str| tmp.path().join(name);
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("fixture reproduction: main table", Box::new(|| main_table(&dir("main")))),
        ("fixture reproduction: ablation", Box::new(|| ablation(&dir("ablation")))),
        ("failure coverage of the update function", Box::new(phi_coverage)),
        ("learning increment", Box::new(learning_increment)),
        ("strategy purity and ablation correspondence", Box::new(strategy_purity)),
        ("transfer", Box::new(transfer)),
        ("determinism", Box::new(|| determinism(&dir("determinism")))),
        ("curriculum properties", Box::new(curriculum)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match verdict {
            Ok(detail) => println!("[PASS] {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
