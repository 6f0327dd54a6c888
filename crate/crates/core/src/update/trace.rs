use serde::{Deserialize, Serialize};

use crate::memory::Timestamp;

pub const EVENT_MODEL_CALL: &str = "model_call";
pub const EVENT_TOOL_CALL: &str = "tool_call";
pub const EVENT_OUTPUT: &str = "output";
pub const EVENT_ERROR: &str = "error";
pub const EVENT_VALIDATION: &str = "validation";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: String,
    pub payload: String,
    /// Offset from trace start.
    pub at_ms: u64,
}

impl TraceEvent {
    pub fn new(seq: u64, kind: &str, payload: impl Into<String>, at_ms: u64) -> Self {
        TraceEvent {
            seq,
            kind: kind.to_string(),
            payload: payload.into(),
            at_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Completed,
    Aborted,
}

/// Ordered record of one task attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub case_id: String,
    pub task_category: String,
    /// Logical start time; becomes `created_at` of everything learned from
    /// this trace.
    #[serde(default)]
    pub started_at: Timestamp,
    pub events: Vec<TraceEvent>,
    pub final_output: String,
    pub duration_ms: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub exit: ExitStatus,
}

impl ExecutionTrace {
    /// Payload of the first `model_call` event, i.e. the rendered prompt.
    pub fn prompt(&self) -> Option<&str> {
        self.events
            .iter()
            .find(|e| e.kind == EVENT_MODEL_CALL)
            .map(|e| e.payload.as_str())
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens_in + self.tokens_out
    }

    /// Checks ordering invariants: strictly increasing `seq`, non-decreasing
    /// `at_ms`, and `duration_ms` covering the last event.
    pub fn check(&self) -> Result<(), String> {
        for pair in self.events.windows(2) {
            if pair[1].seq <= pair[0].seq {
                return Err(format!(
                    "event seq {} does not follow {}",
                    pair[1].seq, pair[0].seq
                ));
            }
            if pair[1].at_ms < pair[0].at_ms {
                return Err(format!("event {} goes back in time", pair[1].seq));
            }
        }
        if let Some(last) = self.events.iter().map(|e| e.at_ms).max() {
            if self.duration_ms < last {
                return Err(format!(
                    "duration {} ms shorter than last event at {} ms",
                    self.duration_ms, last
                ));
            }
        }
        Ok(())
    }
}
