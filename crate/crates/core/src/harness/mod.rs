//! Scoring, protocol runs and metric aggregation.
//!
//! A protocol run executes every task's fifteen samples through one agent's
//! case loop. Runtime errors never stop a run: the failing sample is counted
//! as errored with score 0 and the loop resumes with the next sample.

mod ablation;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationCondition, AblationReport, ConditionResult};
pub use report::{
    compare, eval_all, render_ablation_text, render_report_text, BestBaseline, Comparison,
    EvalReport, GlobalMetrics, GroupGain, MethodRow, Provenance, TaskDelta, REPORT_VERSION,
};

use crate::context::Strategy;
use crate::memory::MemoryBank;
use crate::par::{self, Execution};
use crate::runtime::{run_case_loop, BackendError, BackendPool, RunOptions};
use crate::suite::{SignalSpec, Suite, SuiteError, TaskDefinition, SAMPLES_PER_TASK};
use crate::text::normalize;
use crate::transfer::TransferError;
use crate::update::{ExecutionTrace, ExitStatus, ExperienceUpdater, FailureDetectors};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error("suite must define all six task categories")]
    IncompleteSuite,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("task `{task}` aggregated {got} samples, expected {SAMPLES_PER_TASK}")]
    SampleCount { task: String, got: usize },
    #[error("no baseline result for task `{0}`")]
    MissingBaseline(String),
    #[error("no `{method}` result for task `{task}`")]
    MissingMethod { method: String, task: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Rubric outcome of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    /// Number of satisfied checkpoints.
    pub score: u8,
    pub success: bool,
    pub satisfied: Vec<String>,
    pub signals_fired: Vec<String>,
    pub errored: bool,
}

fn sample_id_of(task: &TaskDefinition, trace: &ExecutionTrace) -> String {
    let marker = format!("{}/", task.category_id);
    match trace.case_id.rfind(&marker) {
        Some(pos) => trace.case_id[pos..].to_string(),
        None => trace.case_id.clone(),
    }
}

/// Scores `trace` against the task's rubric and signals.
pub fn score_sample(
    task: &TaskDefinition,
    trace: &ExecutionTrace,
    detectors: &FailureDetectors,
) -> SampleScore {
    let output = normalize(&trace.final_output);
    let satisfied: Vec<String> = task
        .rubric
        .iter()
        .filter(|c| c.pattern.matches_normalized(&output))
        .map(|c| c.id.clone())
        .collect();
    let signals_fired = task
        .signals
        .iter()
        .filter(|s| s.pattern.matches_normalized(&output))
        .map(|s| s.id.clone())
        .collect();
    let errored = trace.exit == ExitStatus::Aborted
        || !detectors.classify(trace, task.deadline_ms).is_empty();
    let primary = satisfied.contains(&task.primary().id);
    let score = satisfied.len() as u8;
    SampleScore {
        sample_id: sample_id_of(task, trace),
        score,
        success: primary && score >= crate::memory::SUCCESS_SCORE_THRESHOLD && !errored,
        satisfied,
        signals_fired,
        errored,
    }
}

/// What the harness kept from one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub score: SampleScore,
    pub duration_ms: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Set when the sample could not be executed at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_error: Option<String>,
}

impl SampleRecord {
    fn from_trace(trace: &ExecutionTrace, score: SampleScore) -> Self {
        SampleRecord {
            sample_id: score.sample_id.clone(),
            score,
            duration_ms: trace.duration_ms,
            tokens_in: trace.tokens_in,
            tokens_out: trace.tokens_out,
            runtime_error: None,
        }
    }

    fn failed(sample_id: &str, error: String) -> Self {
        SampleRecord {
            sample_id: sample_id.to_string(),
            score: SampleScore {
                sample_id: sample_id.to_string(),
                score: 0,
                success: false,
                satisfied: Vec::new(),
                signals_fired: Vec::new(),
                errored: true,
            },
            duration_ms: 0,
            tokens_in: 0,
            tokens_out: 0,
            runtime_error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub samples: usize,
    pub score_total: u32,
    pub success_count: u32,
    pub score_mean: f64,
    pub success_rate: f64,
    pub mean_time_ms: f64,
    pub mean_tokens: f64,
    pub error_count: u32,
    pub signal_counts: BTreeMap<String, u32>,
    pub signal_trigger_rates: BTreeMap<String, f64>,
}

impl TaskMetrics {
    /// Aggregates exactly one protocol's worth of samples.
    pub fn aggregate(
        task: &str,
        records: &[SampleRecord],
        signals: &[SignalSpec],
    ) -> Result<TaskMetrics, HarnessError> {
        if records.len() != SAMPLES_PER_TASK {
            return Err(HarnessError::SampleCount {
                task: task.to_string(),
                got: records.len(),
            });
        }
        let n = records.len() as f64;
        let score_total: u32 = records.iter().map(|r| u32::from(r.score.score)).sum();
        let success_count = records.iter().filter(|r| r.score.success).count() as u32;
        let time: u64 = records.iter().map(|r| r.duration_ms).sum();
        let tokens: u64 = records.iter().map(|r| r.tokens_in + r.tokens_out).sum();
        let signal_counts: BTreeMap<String, u32> = signals
            .iter()
            .map(|s| {
                let fired = records
                    .iter()
                    .filter(|r| r.score.signals_fired.contains(&s.id))
                    .count() as u32;
                (s.id.clone(), fired)
            })
            .collect();
        Ok(TaskMetrics {
            samples: records.len(),
            score_total,
            success_count,
            score_mean: f64::from(score_total) / n,
            success_rate: f64::from(success_count) / n,
            mean_time_ms: time as f64 / n,
            mean_tokens: tokens as f64 / n,
            error_count: records.iter().filter(|r| r.score.errored).count() as u32,
            signal_trigger_rates: signal_counts
                .iter()
                .map(|(k, v)| (k.clone(), f64::from(*v) / n))
                .collect(),
            signal_counts,
        })
    }

    /// Re-derives the means from the stored counts.
    pub fn check(&self) -> Result<(), String> {
        if self.samples != SAMPLES_PER_TASK {
            return Err(format!(
                "{} samples, expected {SAMPLES_PER_TASK}",
                self.samples
            ));
        }
        let n = self.samples as f64;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        if self.score_total > 4 * self.samples as u32 || self.success_count > self.samples as u32 {
            return Err("counts exceed sample count".into());
        }
        if !close(self.score_mean, f64::from(self.score_total) / n)
            || !close(self.success_rate, f64::from(self.success_count) / n)
        {
            return Err("means disagree with counts".into());
        }
        if !(0.0..=4.0).contains(&self.score_mean) || !(0.0..=1.0).contains(&self.success_rate) {
            return Err("mean out of range".into());
        }
        if self.error_count > self.samples as u32 {
            return Err("error count exceeds sample count".into());
        }
        for (id, rate) in &self.signal_trigger_rates {
            let count = self.signal_counts.get(id).copied().unwrap_or(u32::MAX);
            if count > self.samples as u32 || !close(*rate, f64::from(count) / n) {
                return Err(format!("signal `{id}` rate disagrees with its count"));
            }
        }
        Ok(())
    }
}

/// One strategy on one task, from a fresh copy of the initial bank.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub task: String,
    pub label: String,
    pub strategy: Strategy,
    pub metrics: TaskMetrics,
    pub samples: Vec<SampleRecord>,
    pub final_bank: MemoryBank,
}

/// One strategy over a set of tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub label: String,
    pub strategy: Strategy,
    pub tasks: Vec<TaskRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessOptions {
    pub run: RunOptions,
    pub execution: Execution,
}

impl HarnessOptions {
    pub fn for_suite(suite: &Suite) -> Self {
        HarnessOptions {
            run: RunOptions {
                budget_chars: suite.budget_chars,
                ..RunOptions::default()
            },
            execution: Execution::default(),
        }
    }
}

/// Runs the fifteen samples of `task` in protocol order. Samples whose
/// execution fails are recorded as errored and skipped.
pub fn run_task(
    task: &TaskDefinition,
    label: &str,
    strategy: Strategy,
    backend: &dyn crate::runtime::Backend,
    bank0: &MemoryBank,
    updater: &ExperienceUpdater,
    options: &RunOptions,
) -> Result<TaskRun, HarnessError> {
    let samples = task.samples();
    let mut bank = bank0.clone();
    let mut records = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let outcome = run_case_loop(
            &bank,
            task,
            &samples[start..],
            strategy,
            backend,
            updater,
            options,
        )
        .map_err(|e| HarnessError::Invariant(e.to_string()))?;
        records.extend(
            outcome
                .steps
                .iter()
                .map(|s| SampleRecord::from_trace(&s.trace, s.score.clone())),
        );
        bank = outcome.bank;
        match outcome.halted {
            Some(halt) => {
                records.push(SampleRecord::failed(
                    &halt.sample_id,
                    halt.error.to_string(),
                ));
                start += halt.index + 1;
            }
            None => break,
        }
    }
    let metrics = TaskMetrics::aggregate(&task.category_id, &records, &task.signals)?;
    Ok(TaskRun {
        task: task.category_id.clone(),
        label: label.to_string(),
        strategy,
        metrics,
        samples: records,
        final_bank: bank,
    })
}

/// One job of a run matrix: `strategy` on `task`, replaying the recording
/// named `label`, starting from `bank`.
#[derive(Debug, Clone)]
pub struct Job {
    pub label: String,
    pub strategy: Strategy,
    pub task: String,
    pub bank: MemoryBank,
}

/// Runs independent jobs, in parallel when `options.execution` allows.
/// Results come back in job order.
pub fn run_jobs(
    suite: &Suite,
    jobs: &[Job],
    pool: &dyn BackendPool,
    options: &HarnessOptions,
) -> Result<Vec<TaskRun>, HarnessError> {
    let updater = ExperienceUpdater::from_suite(suite);
    for job in jobs {
        suite.task(&job.task)?;
        pool.backend_for(&job.label)?;
    }
    par::map(jobs, options.execution, |job| {
        let task = suite.task(&job.task)?;
        let backend = pool.backend_for(&job.label)?;
        run_task(
            task,
            &job.label,
            job.strategy,
            backend.as_ref(),
            &job.bank,
            &updater,
            &options.run,
        )
    })
    .into_iter()
    .collect()
}

/// Every strategy in `methods` over all six tasks, each task from `bank0`.
pub fn run_protocols(
    suite: &Suite,
    methods: &[Strategy],
    pool: &dyn BackendPool,
    bank0: &MemoryBank,
    options: &HarnessOptions,
) -> Result<Vec<ProtocolRun>, HarnessError> {
    if !suite.is_complete() {
        return Err(HarnessError::IncompleteSuite);
    }
    let jobs: Vec<Job> = methods
        .iter()
        .flat_map(|m| {
            suite.tasks.iter().map(move |t| Job {
                label: m.slug().to_string(),
                strategy: *m,
                task: t.category_id.clone(),
                bank: bank0.clone(),
            })
        })
        .collect();
    let mut runs = run_jobs(suite, &jobs, pool, options)?.into_iter();
    Ok(methods
        .iter()
        .map(|m| ProtocolRun {
            label: m.slug().to_string(),
            strategy: *m,
            tasks: runs.by_ref().take(suite.tasks.len()).collect(),
        })
        .collect())
}

/// The protocol for one strategy.
pub fn run_protocol(
    suite: &Suite,
    method: Strategy,
    pool: &dyn BackendPool,
    bank0: &MemoryBank,
    options: &HarnessOptions,
) -> Result<ProtocolRun, HarnessError> {
    Ok(run_protocols(suite, &[method], pool, bank0, options)?.remove(0))
}
