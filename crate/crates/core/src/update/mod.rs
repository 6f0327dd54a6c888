//! The memory update function: turns one scored execution trace into new
//! constraints, skill validations and a case record.
//!
//! The update is symbolic. Failures come from the detector pipeline in
//! [`detect`], constraint text from a fixed template table, skills from
//! rubric checkpoints that declare one. Facts are never written here; they
//! are seeded or imported.

mod detect;
mod trace;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use detect::{
    classify_failures, DetectedFailure, DetectorTable, FailureDetectors, FailureKind,
    InvalidFailureKind,
};
pub use trace::{
    ExecutionTrace, ExitStatus, TraceEvent, EVENT_ERROR, EVENT_MODEL_CALL, EVENT_OUTPUT,
    EVENT_TOOL_CALL, EVENT_VALIDATION,
};

use crate::curriculum::{DifficultyInputs, DifficultyWeights};
use crate::harness::SampleScore;
use crate::memory::{
    BankError, CaseRecord, ConstraintRule, Entry, Insertion, MemoryBank, SkillTemplate, Timestamp,
};
use crate::suite::{Suite, TaskDefinition};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("case `{0}` is already recorded in this bank")]
    DuplicateCase(String),
    #[error(transparent)]
    Bank(#[from] BankError),
}

/// Constraint text per failure kind. Placeholders: `{category}`,
/// `{threshold}` (loop threshold) and `{label}` (for `other`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintTemplates {
    pub timeout: String,
    pub runtime_error: String,
    pub blank_output: String,
    pub loop_detected: String,
    pub schema_validation_failure: String,
    pub other: String,
}

impl Default for ConstraintTemplates {
    fn default() -> Self {
        ConstraintTemplates {
            timeout: "[{category}] Respect the deadline: bound every step, checkpoint partial results and stop before the time budget runs out.".into(),
            runtime_error: "[{category}] Check inputs and preconditions before each call and handle exceptions explicitly instead of retrying blindly.".into(),
            blank_output: "[{category}] Never finish with an empty answer; always emit a diagnosis and an explicit status.".into(),
            loop_detected: "[{category}] Terminate after {threshold} identical consecutive calls; change strategy or stop.".into(),
            schema_validation_failure: "[{category}] After a schema validation failure, field formats should be rechecked before emitting output.".into(),
            other: "[{category}] Investigate the cause of \"{label}\" before repeating the same approach.".into(),
        }
    }
}

impl ConstraintTemplates {
    fn template(&self, kind: &FailureKind) -> &str {
        match kind {
            FailureKind::Timeout => &self.timeout,
            FailureKind::RuntimeError => &self.runtime_error,
            FailureKind::BlankOutput => &self.blank_output,
            FailureKind::LoopDetected => &self.loop_detected,
            FailureKind::SchemaValidationFailure => &self.schema_validation_failure,
            FailureKind::Other(_) => &self.other,
        }
    }

    pub fn render(&self, kind: &FailureKind, category: &str, loop_threshold: usize) -> String {
        let label = match kind {
            FailureKind::Other(label) if !label.trim().is_empty() => label.as_str(),
            FailureKind::Other(_) => "unlabeled error",
            _ => "",
        };
        self.template(kind)
            .replace("{category}", category)
            .replace("{threshold}", &loop_threshold.to_string())
            .replace("{label}", label)
    }
}

/// Hook for producing the natural-language summary stored with each case.
/// The default is rule-based; a model-backed summarizer can be plugged in
/// through [`ExperienceUpdater::with_summarizer`].
pub trait CaseSummarizer: Send + Sync {
    fn summarize(
        &self,
        task: &TaskDefinition,
        trace: &ExecutionTrace,
        score: &SampleScore,
        failures: &[FailureKind],
    ) -> String;
}

/// Deterministic summary built from the rubric outcome.
#[derive(Debug, Clone, Copy, Default)]
pub struct RubricSummarizer;

impl CaseSummarizer for RubricSummarizer {
    fn summarize(
        &self,
        task: &TaskDefinition,
        _trace: &ExecutionTrace,
        score: &SampleScore,
        failures: &[FailureKind],
    ) -> String {
        let list = |items: Vec<String>| {
            if items.is_empty() {
                "none".to_string()
            } else {
                items.join(", ")
            }
        };
        let missed: Vec<String> = task
            .rubric
            .iter()
            .filter(|c| !score.satisfied.contains(&c.id))
            .map(|c| c.id.clone())
            .collect();
        format!(
            "{} {}: score {}/4, {}; covered {}; missed {}; failures {}",
            task.category_id,
            score.sample_id,
            score.score,
            if score.success { "success" } else { "failure" },
            list(score.satisfied.clone()),
            list(missed),
            list(failures.iter().map(ToString::to_string).collect()),
        )
    }
}

/// What one application of the update function changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDelta {
    /// Always empty: the update function never writes facts.
    pub new_facts: Vec<String>,
    pub new_constraints: Vec<String>,
    /// Skills added or re-validated.
    pub new_skills: Vec<String>,
    pub case_recorded: CaseRecord,
    pub failures: Vec<FailureKind>,
}

/// Configured update function.
#[derive(Clone)]
pub struct ExperienceUpdater {
    pub detectors: FailureDetectors,
    pub templates: ConstraintTemplates,
    pub weights: DifficultyWeights,
    summarizer: Arc<dyn CaseSummarizer>,
}

impl fmt::Debug for ExperienceUpdater {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperienceUpdater")
            .field("detectors", self.detectors.table())
            .field("templates", &self.templates)
            .field("weights", &self.weights)
            .finish_non_exhaustive()
    }
}

impl Default for ExperienceUpdater {
    fn default() -> Self {
        ExperienceUpdater {
            detectors: FailureDetectors::default(),
            templates: ConstraintTemplates::default(),
            weights: DifficultyWeights::default(),
            summarizer: Arc::new(RubricSummarizer),
        }
    }
}

impl ExperienceUpdater {
    pub fn from_suite(suite: &Suite) -> Self {
        ExperienceUpdater {
            detectors: FailureDetectors::new(suite.detectors.clone())
                .expect("suite detectors validated on load"),
            templates: suite.constraint_templates.clone(),
            weights: suite.difficulty_weights,
            summarizer: Arc::new(RubricSummarizer),
        }
    }

    pub fn with_summarizer(mut self, summarizer: Arc<dyn CaseSummarizer>) -> Self {
        self.summarizer = summarizer;
        self
    }

    pub fn classify(&self, trace: &ExecutionTrace, deadline_ms: u64) -> Vec<DetectedFailure> {
        self.detectors.classify(trace, deadline_ms)
    }

    /// Rule for `kind` in `category`. Same inputs always give the same id.
    pub fn synthesize_constraint(
        &self,
        kind: &FailureKind,
        category: &str,
        source_case: &str,
        created_at: Timestamp,
    ) -> ConstraintRule {
        let text = self
            .templates
            .render(kind, category, self.detectors.table().loop_threshold);
        ConstraintRule::new(
            text,
            Some(kind.clone()),
            [category, kind.slug()],
            source_case,
            created_at,
        )
    }

    /// Applies the update function to `bank`. Fails if the case is already
    /// recorded.
    pub fn apply(
        &self,
        bank: &MemoryBank,
        task: &TaskDefinition,
        trace: &ExecutionTrace,
        rubric_result: &SampleScore,
    ) -> Result<(MemoryBank, UpdateDelta), UpdateError> {
        if bank.cases.iter().any(|c| c.case_id == trace.case_id) {
            return Err(UpdateError::DuplicateCase(trace.case_id.clone()));
        }
        let mut next = bank.clone();
        let failures: Vec<FailureKind> = self
            .classify(trace, task.deadline_ms)
            .into_iter()
            .map(|d| d.kind)
            .collect();

        let mut new_constraints = Vec::new();
        for kind in &failures {
            let rule = self.synthesize_constraint(
                kind,
                &task.category_id,
                &trace.case_id,
                trace.started_at,
            );
            let id = rule.id.clone();
            if next.insert(Entry::Constraint(rule))? == Insertion::Added {
                new_constraints.push(id);
            }
        }

        let mut new_skills = Vec::new();
        for skill in extract_skills(task, trace, rubric_result) {
            let id = skill.id.clone();
            match next.insert(Entry::Skill(skill))? {
                Insertion::Added | Insertion::Incremented => new_skills.push(id),
                Insertion::Kept => {}
            }
        }

        let difficulty = self.weights.estimate(&DifficultyInputs {
            failure_count: failures.len(),
            score: rubric_result.score,
            duration_ms: trace.duration_ms,
            deadline_ms: task.deadline_ms,
        });
        let case = CaseRecord {
            case_id: trace.case_id.clone(),
            task_category: task.category_id.clone(),
            summary: self
                .summarizer
                .summarize(task, trace, rubric_result, &failures),
            difficulty,
            success: rubric_result.success,
            score: rubric_result.score,
            duration_ms: trace.duration_ms,
            failure_kinds: failures.clone(),
            created_at: trace.started_at,
        };
        next.insert(Entry::Case(case.clone()))?;

        Ok((
            next,
            UpdateDelta {
                new_facts: Vec::new(),
                new_constraints,
                new_skills,
                case_recorded: case,
                failures,
            },
        ))
    }
}

/// Rule for `kind` in `category` from the built-in template table.
pub fn synthesize_constraint(kind: &FailureKind, task_category: &str) -> ConstraintRule {
    ExperienceUpdater::default().synthesize_constraint(kind, task_category, "synthesized", 0)
}

/// One template per satisfied checkpoint that declares a skill; nothing for
/// unsuccessful samples.
pub fn extract_skills(
    task: &TaskDefinition,
    _trace: &ExecutionTrace,
    rubric_result: &SampleScore,
) -> Vec<SkillTemplate> {
    if !rubric_result.success {
        return Vec::new();
    }
    task.rubric
        .iter()
        .filter(|c| rubric_result.satisfied.contains(&c.id))
        .filter_map(|c| c.skill.as_ref())
        .map(|spec| SkillTemplate::new(spec.name.clone(), spec.steps.clone(), task.tags.iter()))
        .collect()
}

/// [`ExperienceUpdater::apply`] with the built-in configuration.
pub fn apply_phi(
    bank: &MemoryBank,
    task: &TaskDefinition,
    trace: &ExecutionTrace,
    rubric_result: &SampleScore,
) -> Result<(MemoryBank, UpdateDelta), UpdateError> {
    ExperienceUpdater::default().apply(bank, task, trace, rubric_result)
}
