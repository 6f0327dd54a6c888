//! Failure detection over execution traces.
//!
//! Detectors run in a fixed order and each fires at most once per trace:
//! timeout, runtime error, schema validation failure, loop, blank output,
//! then a catch-all for error events nothing else claimed. The patterns
//! live in a versioned [`DetectorTable`] so suites can pin them.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::trace::{
    ExecutionTrace, ExitStatus, EVENT_ERROR, EVENT_MODEL_CALL, EVENT_TOOL_CALL, EVENT_VALIDATION,
};
use crate::text::normalize;

/// Standardized failure categories.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum FailureKind {
    Timeout,
    RuntimeError,
    BlankOutput,
    LoopDetected,
    SchemaValidationFailure,
    Other(String),
}

impl FailureKind {
    pub const NAMED: [FailureKind; 5] = [
        FailureKind::Timeout,
        FailureKind::RuntimeError,
        FailureKind::BlankOutput,
        FailureKind::LoopDetected,
        FailureKind::SchemaValidationFailure,
    ];

    /// Short tag used for constraint tags and template lookup.
    pub fn slug(&self) -> &str {
        match self {
            FailureKind::Timeout => "timeout",
            FailureKind::RuntimeError => "runtime_error",
            FailureKind::BlankOutput => "blank_output",
            FailureKind::LoopDetected => "loop_detected",
            FailureKind::SchemaValidationFailure => "schema_validation_failure",
            FailureKind::Other(_) => "other",
        }
    }

    pub fn check(&self) -> Result<(), InvalidFailureKind> {
        match self {
            FailureKind::Other(label) if label.trim().is_empty() => {
                Err(InvalidFailureKind("`other` failure needs a label".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct InvalidFailureKind(String);

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureKind::Other(label) => write!(f, "other:{label}"),
            named => f.write_str(named.slug()),
        }
    }
}

impl From<FailureKind> for String {
    fn from(kind: FailureKind) -> String {
        kind.to_string()
    }
}

impl FromStr for FailureKind {
    type Err = InvalidFailureKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind = match s {
            "timeout" => FailureKind::Timeout,
            "runtime_error" => FailureKind::RuntimeError,
            "blank_output" => FailureKind::BlankOutput,
            "loop_detected" => FailureKind::LoopDetected,
            "schema_validation_failure" => FailureKind::SchemaValidationFailure,
            other => match other.strip_prefix("other:") {
                Some(label) => FailureKind::Other(label.to_string()),
                None => return Err(InvalidFailureKind(format!("unknown failure kind `{s}`"))),
            },
        };
        kind.check()?;
        Ok(kind)
    }
}

impl TryFrom<String> for FailureKind {
    type Error = InvalidFailureKind;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Serializable detector configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTable {
    pub version: u32,
    /// Matched against `error` event payloads.
    pub timeout: String,
    /// Matched against `error` event payloads.
    pub runtime_error: String,
    /// Matched against `validation` event payloads.
    pub schema_failure: String,
    /// Consecutive identical call events that count as a loop.
    pub loop_threshold: usize,
}

impl Default for DetectorTable {
    fn default() -> Self {
        DetectorTable {
            version: 1,
            timeout: r"timed? ?out".into(),
            runtime_error: r"(exception|traceback|panic|runtime error)".into(),
            schema_failure: r"(schema|format).*(fail|invalid)".into(),
            loop_threshold: 3,
        }
    }
}

/// Longest label kept for [`FailureKind::Other`].
const OTHER_LABEL_CHARS: usize = 48;

/// A detector hit: the failure and the event that triggered it, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectedFailure {
    pub kind: FailureKind,
    pub seq: Option<u64>,
}

/// Compiled form of a [`DetectorTable`].
#[derive(Debug, Clone)]
pub struct FailureDetectors {
    table: DetectorTable,
    timeout: Regex,
    runtime_error: Regex,
    schema_failure: Regex,
}

impl FailureDetectors {
    pub fn new(table: DetectorTable) -> Result<Self, regex::Error> {
        let compile = |p: &str| RegexBuilder::new(p).case_insensitive(true).build();
        Ok(FailureDetectors {
            timeout: compile(&table.timeout)?,
            runtime_error: compile(&table.runtime_error)?,
            schema_failure: compile(&table.schema_failure)?,
            table,
        })
    }

    pub fn table(&self) -> &DetectorTable {
        &self.table
    }

    /// Runs the detector pipeline. `deadline_ms` is the task's time budget.
    pub fn classify(&self, trace: &ExecutionTrace, deadline_ms: u64) -> Vec<DetectedFailure> {
        let errors: Vec<_> = trace
            .events
            .iter()
            .filter(|e| e.kind == EVENT_ERROR)
            .collect();
        let mut found = Vec::new();

        let timed_out_event = errors.iter().find(|e| self.timeout.is_match(&e.payload));
        if let Some(e) = timed_out_event {
            found.push(hit(FailureKind::Timeout, Some(e.seq)));
        } else if trace.duration_ms > deadline_ms {
            found.push(hit(
                FailureKind::Timeout,
                trace.events.last().map(|e| e.seq),
            ));
        }

        if let Some(e) = errors
            .iter()
            .find(|e| self.runtime_error.is_match(&e.payload))
        {
            found.push(hit(FailureKind::RuntimeError, Some(e.seq)));
        }

        if let Some(e) = trace
            .events
            .iter()
            .find(|e| e.kind == EVENT_VALIDATION && self.schema_failure.is_match(&e.payload))
        {
            found.push(hit(FailureKind::SchemaValidationFailure, Some(e.seq)));
        }

        if let Some(seq) = self.find_loop(trace) {
            found.push(hit(FailureKind::LoopDetected, Some(seq)));
        }

        if trace.exit == ExitStatus::Completed && normalize(&trace.final_output).is_empty() {
            found.push(hit(
                FailureKind::BlankOutput,
                trace.events.last().map(|e| e.seq),
            ));
        }

        if let Some(e) = errors.iter().find(|e| {
            !self.timeout.is_match(&e.payload) && !self.runtime_error.is_match(&e.payload)
        }) {
            found.push(hit(
                FailureKind::Other(other_label(&e.payload)),
                Some(e.seq),
            ));
        }

        found
    }

    /// Seq of the call that completes the first run of `loop_threshold`
    /// identical consecutive calls.
    fn find_loop(&self, trace: &ExecutionTrace) -> Option<u64> {
        let threshold = self.table.loop_threshold.max(1);
        let mut run = 0usize;
        let mut last: Option<(&str, String)> = None;
        for event in trace
            .events
            .iter()
            .filter(|e| e.kind == EVENT_MODEL_CALL || e.kind == EVENT_TOOL_CALL)
        {
            let key = (event.kind.as_str(), normalize(&event.payload));
            if last.as_ref() == Some(&key) {
                run += 1;
            } else {
                run = 1;
                last = Some(key);
            }
            if run >= threshold {
                return Some(event.seq);
            }
        }
        None
    }
}

impl Default for FailureDetectors {
    fn default() -> Self {
        FailureDetectors::new(DetectorTable::default()).expect("built-in detector patterns compile")
    }
}

fn hit(kind: FailureKind, seq: Option<u64>) -> DetectedFailure {
    DetectedFailure { kind, seq }
}

fn other_label(payload: &str) -> String {
    let label: String = normalize(payload).chars().take(OTHER_LABEL_CHARS).collect();
    if label.is_empty() {
        "unlabeled error".into()
    } else {
        label
    }
}

fn default_detectors() -> &'static FailureDetectors {
    static DETECTORS: OnceLock<FailureDetectors> = OnceLock::new();
    DETECTORS.get_or_init(FailureDetectors::default)
}

/// Classifies `trace` with the built-in detector table.
pub fn classify_failures(trace: &ExecutionTrace, deadline_ms: u64) -> Vec<DetectedFailure> {
    default_detectors().classify(trace, deadline_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::update::trace::TraceEvent;

    fn trace(events: Vec<TraceEvent>, output: &str, exit: ExitStatus) -> ExecutionTrace {
        let duration_ms = events.iter().map(|e| e.at_ms).max().unwrap_or(0);
        ExecutionTrace {
            case_id: "c".into(),
            task_category: "tool_orchestration".into(),
            started_at: 0,
            events,
            final_output: output.into(),
            duration_ms,
            tokens_in: 0,
            tokens_out: 0,
            exit,
        }
    }

    fn kinds(found: &[DetectedFailure]) -> Vec<FailureKind> {
        found.iter().map(|d| d.kind.clone()).collect()
    }

    #[test]
    fn timed_out_error_is_timeout() {
        let t = trace(
            vec![
                TraceEvent::new(0, "model_call", "p", 0),
                TraceEvent::new(1, "error", "request timed out", 5),
            ],
            "",
            ExitStatus::Aborted,
        );
        let found = classify_failures(&t, 1000);
        assert_eq!(kinds(&found), vec![FailureKind::Timeout]);
        assert_eq!(found[0].seq, Some(1));
    }

    #[test]
    fn timeout_variants_match() {
        for payload in ["Timeout after 30s", "TIMED OUT", "read timedout"] {
            let t = trace(
                vec![TraceEvent::new(0, "error", payload, 0)],
                "",
                ExitStatus::Aborted,
            );
            assert_eq!(
                kinds(&classify_failures(&t, 1000)),
                vec![FailureKind::Timeout],
                "{payload}"
            );
        }
    }

    #[test]
    fn exceeding_deadline_is_timeout() {
        let mut t = trace(
            vec![TraceEvent::new(0, "output", "done", 0)],
            "done",
            ExitStatus::Completed,
        );
        t.duration_ms = 2000;
        assert_eq!(
            kinds(&classify_failures(&t, 1000)),
            vec![FailureKind::Timeout]
        );
        t.duration_ms = 1000;
        assert!(classify_failures(&t, 1000).is_empty());
    }

    #[test]
    fn clean_trace_has_no_failures() {
        let t = trace(
            vec![
                TraceEvent::new(0, "model_call", "p", 0),
                TraceEvent::new(1, "output", "answer", 3),
            ],
            "answer",
            ExitStatus::Completed,
        );
        assert!(classify_failures(&t, 1000).is_empty());
    }

    #[test]
    fn loop_and_blank_output_in_detector_order() {
        // Hand-applied pipeline: three identical tool calls fire the loop
        // detector at seq 2; completed with empty output fires blank output.
        let t = trace(
            vec![
                TraceEvent::new(0, "tool_call", "search(q)", 0),
                TraceEvent::new(1, "tool_call", "search(q)", 1),
                TraceEvent::new(2, "tool_call", "Search(q) ", 2),
                TraceEvent::new(3, "output", "", 3),
            ],
            "  ",
            ExitStatus::Completed,
        );
        let found = classify_failures(&t, 1000);
        assert_eq!(
            kinds(&found),
            vec![FailureKind::LoopDetected, FailureKind::BlankOutput]
        );
        assert_eq!(found[0].seq, Some(2));
    }

    #[test]
    fn two_identical_calls_are_a_retry_not_a_loop() {
        let t = trace(
            vec![
                TraceEvent::new(0, "tool_call", "a", 0),
                TraceEvent::new(1, "tool_call", "a", 1),
                TraceEvent::new(2, "tool_call", "b", 2),
                TraceEvent::new(3, "tool_call", "a", 3),
            ],
            "ok",
            ExitStatus::Completed,
        );
        assert!(classify_failures(&t, 1000).is_empty());
    }

    #[test]
    fn runtime_schema_and_other() {
        let t = trace(
            vec![
                TraceEvent::new(0, "error", "Traceback (most recent call last)", 0),
                TraceEvent::new(
                    1,
                    "validation",
                    "output_schema: schema validation failed",
                    1,
                ),
                TraceEvent::new(2, "error", "connection refused by upstream", 2),
            ],
            "partial",
            ExitStatus::Completed,
        );
        assert_eq!(
            kinds(&classify_failures(&t, 1000)),
            vec![
                FailureKind::RuntimeError,
                FailureKind::SchemaValidationFailure,
                FailureKind::Other("connection refused by upstream".into()),
            ]
        );
    }

    #[test]
    fn passing_validation_is_not_a_failure() {
        let t = trace(
            vec![TraceEvent::new(0, "validation", "output_format: passed", 0)],
            "x",
            ExitStatus::Completed,
        );
        assert!(classify_failures(&t, 1000).is_empty());
    }

    #[test]
    fn each_detector_fires_once() {
        let t = trace(
            vec![
                TraceEvent::new(0, "error", "timed out", 0),
                TraceEvent::new(1, "error", "timed out again", 1),
            ],
            "",
            ExitStatus::Aborted,
        );
        assert_eq!(
            kinds(&classify_failures(&t, 1000)),
            vec![FailureKind::Timeout]
        );
    }

    #[test]
    fn failure_kind_string_form() {
        for kind in FailureKind::NAMED {
            assert_eq!(kind.to_string().parse::<FailureKind>().unwrap(), kind);
        }
        let other = FailureKind::Other("disk full".into());
        assert_eq!(other.to_string(), "other:disk full");
        assert_eq!("other:disk full".parse::<FailureKind>().unwrap(), other);
        assert!("other:".parse::<FailureKind>().is_err());
        assert!("explosion".parse::<FailureKind>().is_err());
        let json = serde_json::to_string(&FailureKind::LoopDetected).unwrap();
        assert_eq!(json, "\"loop_detected\"");
    }
}
