//! Sample execution and the per-agent case loop.
//!
//! A sample runs as one completion call. The loop retrieves from the bank,
//! assembles a context, executes, scores and applies the update before the
//! next sample, so each sample sees everything learned from the ones before.

mod provider;
mod replay;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use provider::{ProviderBackend, ProviderConfig, API_KEY_ENV};
pub use replay::{FixtureRecord, FixtureSet, ReplayBackend};

use crate::context::{assemble, render, AssembleError, Strategy};
use crate::harness::{score_sample, SampleScore};
use crate::memory::{MemoryBank, Timestamp};
use crate::suite::{TaskDefinition, TaskSample};
use crate::update::{
    ExecutionTrace, ExitStatus, ExperienceUpdater, TraceEvent, UpdateDelta, UpdateError,
    EVENT_ERROR, EVENT_MODEL_CALL, EVENT_OUTPUT, EVENT_VALIDATION,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub sample_id: String,
    pub deadline_ms: u64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
    /// Set when the call itself failed; the sample is then aborted.
    pub backend_error: Option<String>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("no fixture for sample `{sample_id}` in `{label}`")]
    FixtureMissing { label: String, sample_id: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// A completion source. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

/// Hands out the backend for one run. Replay fixtures are recorded per
/// method or ablation condition, so the run label selects the recording;
/// a live provider ignores the label.
pub trait BackendPool: Send + Sync {
    fn backend_for(&self, run_label: &str) -> Result<Arc<dyn Backend>, BackendError>;
    /// Backend name for report provenance.
    fn describe(&self) -> String;
    /// Hash of whatever determines the backend's answers.
    fn fingerprint(&self) -> String;
}

/// The same backend for every run label.
pub struct SharedBackend {
    backend: Arc<dyn Backend>,
    fingerprint: String,
}

impl SharedBackend {
    pub fn new(backend: Arc<dyn Backend>, fingerprint: impl Into<String>) -> Self {
        SharedBackend {
            backend,
            fingerprint: fingerprint.into(),
        }
    }
}

impl BackendPool for SharedBackend {
    fn backend_for(&self, _run_label: &str) -> Result<Arc<dyn Backend>, BackendError> {
        Ok(self.backend.clone())
    }

    fn describe(&self) -> String {
        self.backend.name().to_string()
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error("sample `{sample}` does not belong to task `{task}`")]
    WrongTask { sample: String, task: String },
    #[error("invalid sample list: {0}")]
    InvalidSamples(String),
}

/// Where trace start times come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceClock {
    /// `epoch + ordinal * step_ms`; keeps replay runs byte-identical.
    Logical { epoch: Timestamp, step_ms: u64 },
    /// Milliseconds since the Unix epoch.
    Wall,
}

impl Default for TraceClock {
    fn default() -> Self {
        TraceClock::Logical {
            epoch: 0,
            step_ms: 1_000,
        }
    }
}

impl TraceClock {
    pub fn start_of(&self, sample: &TaskSample) -> Timestamp {
        match *self {
            TraceClock::Logical { epoch, step_ms } => epoch + sample.ordinal() * step_ms,
            TraceClock::Wall => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub budget_chars: usize,
    pub clock: TraceClock,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            budget_chars: 8_000,
            clock: TraceClock::default(),
        }
    }
}

/// Case id of `sample` when executed by `agent_id`.
pub fn case_id_for(agent_id: &str, sample: &TaskSample) -> String {
    format!("{agent_id}/{}", sample.sample_id)
}

/// Runs one sample and records what happened. The rendered prompt is the
/// payload of the first event.
pub fn execute_sample(
    bank: &MemoryBank,
    task: &TaskDefinition,
    sample: &TaskSample,
    strategy: Strategy,
    backend: &dyn Backend,
    options: &RunOptions,
) -> Result<ExecutionTrace, RuntimeError> {
    if sample.task_category != task.category_id {
        return Err(RuntimeError::WrongTask {
            sample: sample.sample_id.clone(),
            task: task.category_id.clone(),
        });
    }
    let context = assemble(bank, task, sample, strategy, options.budget_chars)?;
    let prompt = render(&context);
    let request = CompletionRequest {
        prompt: prompt.clone(),
        sample_id: sample.sample_id.clone(),
        deadline_ms: task.deadline_ms,
        max_tokens: task.max_tokens,
    };
    let result = backend.complete(&request)?;

    let at = result.latency_ms;
    let mut events = vec![TraceEvent::new(0, EVENT_MODEL_CALL, prompt, 0)];
    let exit = match &result.backend_error {
        Some(err) => {
            events.push(TraceEvent::new(1, EVENT_ERROR, err.clone(), at));
            ExitStatus::Aborted
        }
        None => {
            events.push(TraceEvent::new(1, EVENT_OUTPUT, result.text.clone(), at));
            for validator in &task.validators {
                let seq = events.len() as u64;
                let payload = validator.event_payload(&result.text);
                events.push(TraceEvent::new(seq, EVENT_VALIDATION, payload, at));
            }
            ExitStatus::Completed
        }
    };
    Ok(ExecutionTrace {
        case_id: case_id_for(&bank.agent_id, sample),
        task_category: task.category_id.clone(),
        started_at: options.clock.start_of(sample),
        events,
        final_output: result.text,
        duration_ms: result.latency_ms,
        tokens_in: result.tokens_in,
        tokens_out: result.tokens_out,
        exit,
    })
}

/// Everything one sample produced inside the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStep {
    pub trace: ExecutionTrace,
    pub score: SampleScore,
    pub delta: UpdateDelta,
}

/// The sample the loop stopped at, and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Halt {
    pub index: usize,
    pub sample_id: String,
    pub error: RuntimeError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseLoopOutcome {
    pub bank: MemoryBank,
    pub steps: Vec<CaseStep>,
    /// `Some` when the loop stopped early; `steps` then holds the samples
    /// completed before the failure.
    pub halted: Option<Halt>,
}

impl CaseLoopOutcome {
    pub fn is_partial(&self) -> bool {
        self.halted.is_some()
    }
}

/// Executes `samples` in order, scoring each and applying the update so the
/// next sample is assembled from the grown bank. Stops at the first error.
pub fn run_case_loop(
    bank: &MemoryBank,
    task: &TaskDefinition,
    samples: &[TaskSample],
    strategy: Strategy,
    backend: &dyn Backend,
    updater: &ExperienceUpdater,
    options: &RunOptions,
) -> Result<CaseLoopOutcome, RuntimeError> {
    if samples.is_empty() {
        return Err(RuntimeError::InvalidSamples("no samples".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in samples {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(RuntimeError::InvalidSamples(format!(
                "duplicate sample id `{}`",
                s.sample_id
            )));
        }
    }

    let mut current = bank.clone();
    let mut steps = Vec::with_capacity(samples.len());
    for (index, sample) in samples.iter().enumerate() {
        let step =
            execute_sample(&current, task, sample, strategy, backend, options).and_then(|trace| {
                let score = score_sample(task, &trace, &updater.detectors);
                let (next, delta) = updater.apply(&current, task, &trace, &score)?;
                Ok((
                    next,
                    CaseStep {
                        trace,
                        score,
                        delta,
                    },
                ))
            });
        match step {
            Ok((next, step)) => {
                current = next;
                steps.push(step);
            }
            Err(error) => {
                return Ok(CaseLoopOutcome {
                    bank: current,
                    steps,
                    halted: Some(Halt {
                        index,
                        sample_id: sample.sample_id.clone(),
                        error,
                    }),
                })
            }
        }
    }
    Ok(CaseLoopOutcome {
        bank: current,
        steps,
        halted: None,
    })
}
