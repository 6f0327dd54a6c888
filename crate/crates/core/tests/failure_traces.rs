//! Golden traces: one per named failure kind, each classified as exactly
//! that kind and each turned into exactly one constraint.

use std::collections::BTreeSet;
use std::path::PathBuf;

use cbl_core::harness::score_sample;
use cbl_core::update::{ExecutionTrace, ExperienceUpdater, FailureDetectors, FailureKind};
use cbl_core::{classify_failures, Suite};

const DEADLINE_MS: u64 = 120_000;

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn golden(kind: &FailureKind) -> ExecutionTrace {
    let path = data().join("traces").join(format!("{}.json", kind.slug()));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let trace: ExecutionTrace = serde_json::from_str(&text).unwrap();
    trace.check().unwrap();
    trace
}

#[test]
fn every_named_kind_has_a_golden_trace() {
    for kind in FailureKind::NAMED {
        let kinds: Vec<FailureKind> = classify_failures(&golden(&kind), DEADLINE_MS)
            .into_iter()
            .map(|d| d.kind)
            .collect();
        assert_eq!(kinds, vec![kind.clone()], "{}", kind.slug());
    }
}

#[test]
fn no_extra_golden_files() {
    let names: BTreeSet<String> = std::fs::read_dir(data().join("traces"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let expected: BTreeSet<String> =
        FailureKind::NAMED.iter().map(|k| format!("{}.json", k.slug())).collect();
    assert_eq!(names, expected);
}

#[test]
fn golden_traces_write_one_rule_each() {
    let suite = Suite::load(data().join("suite.json")).unwrap();
    let updater = ExperienceUpdater::from_suite(&suite);
    let detectors = FailureDetectors::default();
    for kind in FailureKind::NAMED {
        let trace = golden(&kind);
        let task = suite.task(&trace.task_category).unwrap();
        let score = score_sample(task, &trace, &detectors);
        assert!(score.errored && !score.success);
        let bank = suite.seed_bank("golden");
        let (next, delta) = updater.apply(&bank, task, &trace, &score).unwrap();
        assert_eq!(delta.failures, vec![kind.clone()]);
        assert_eq!(next.constraints.len(), 1, "{}", kind.slug());
        assert_eq!(next.constraints[0].trigger_failure, Some(kind.clone()));
        assert_eq!(next.facts, bank.facts);
        if kind == FailureKind::SchemaValidationFailure {
            assert!(next.constraints[0].text.contains("field formats should be rechecked"));
        }
    }
}

#[test]
fn ten_schema_failures_one_rule() {
    let suite = Suite::load(data().join("suite.json")).unwrap();
    let updater = ExperienceUpdater::from_suite(&suite);
    let detectors = FailureDetectors::default();
    let base = golden(&FailureKind::SchemaValidationFailure);
    let task = suite.task(&base.task_category).unwrap();
    let mut bank = suite.seed_bank("golden");
    for i in 0..10u64 {
        let mut trace = base.clone();
        trace.case_id = format!("golden/{}/r1v{i}", task.category_id);
        trace.started_at = i * 1_000;
        let score = score_sample(task, &trace, &detectors);
        bank = updater.apply(&bank, task, &trace, &score).unwrap().0;
    }
    assert_eq!(bank.constraints.len(), 1);
    assert_eq!(bank.cases.len(), 10);
}

#[test]
fn deadline_overrun_alone_is_a_timeout() {
    let mut trace = golden(&FailureKind::BlankOutput);
    trace.final_output = "Remediation plan: roll back.".into();
    trace.events[1].payload = trace.final_output.clone();
    assert!(classify_failures(&trace, DEADLINE_MS).is_empty());
    trace.duration_ms = DEADLINE_MS + 1;
    let kinds: Vec<_> = classify_failures(&trace, DEADLINE_MS).into_iter().map(|d| d.kind).collect();
    assert_eq!(kinds, vec![FailureKind::Timeout]);
}
