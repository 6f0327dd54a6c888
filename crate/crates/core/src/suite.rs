//! Task suite configuration: the six task categories with their rubrics,
//! behavioral signals, checklists and prompt variants, plus the tunables of
//! the update function (detector table, constraint templates, difficulty
//! weights).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::curriculum::DifficultyWeights;
use crate::memory::{canonical_json, Entry, KnowledgeFact, MemoryBank};
use crate::text::{normalize, normalize_tags, sha256_hex};
use crate::update::{ConstraintTemplates, DetectorTable};

pub const ROUNDS: u32 = 3;
pub const VARIANTS: u32 = 5;
pub const SAMPLES_PER_TASK: usize = (ROUNDS * VARIANTS) as usize;
pub const CHECKPOINTS_PER_RUBRIC: usize = 4;

/// The six category slugs, in benchmark order (structured to open-ended).
pub const CATEGORIES: [&str; 6] = [
    "tool_orchestration",
    "rlhf_training",
    "enterprise_rag",
    "long_horizon_ops",
    "preference_drift",
    "multiagent_discovery",
];

/// Complexity group a category belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplexityGroup {
    Structured,
    Complex,
    OpenEnded,
}

impl ComplexityGroup {
    pub fn of(category: &str) -> Option<ComplexityGroup> {
        match category {
            "tool_orchestration" | "rlhf_training" | "enterprise_rag" => {
                Some(ComplexityGroup::Structured)
            }
            "long_horizon_ops" | "preference_drift" => Some(ComplexityGroup::Complex),
            "multiagent_discovery" => Some(ComplexityGroup::OpenEnded),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ComplexityGroup::Structured => "structured",
            ComplexityGroup::Complex => "complex",
            ComplexityGroup::OpenEnded => "open-ended",
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SuiteError {
    #[error("cannot read suite file {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid suite JSON: {0}")]
    Parse(String),
    #[error("invalid task `{task}`: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("invalid suite: {0}")]
    Invalid(String),
    #[error("unknown task category `{0}`")]
    UnknownTask(String),
}

/// Serialized form of a [`Matcher`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchRule {
    /// At least one keyword occurs in the normalized text.
    Any(Vec<String>),
    /// Every keyword occurs in the normalized text.
    All(Vec<String>),
    /// Case-insensitive regex over the normalized text.
    Regex(String),
}

/// A compiled [`MatchRule`], evaluated against normalized output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MatchRule", into = "MatchRule")]
pub struct Matcher {
    rule: MatchRule,
    compiled: Compiled,
}

#[derive(Debug, Clone)]
enum Compiled {
    Any(Vec<String>),
    All(Vec<String>),
    Regex(Regex),
}

impl Matcher {
    pub fn new(rule: MatchRule) -> Result<Self, String> {
        let keywords = |words: &[String]| -> Result<Vec<String>, String> {
            let out: Vec<String> = words.iter().map(|w| normalize(w)).collect();
            if out.is_empty() || out.iter().any(String::is_empty) {
                return Err("keyword rule needs at least one non-empty keyword".into());
            }
            Ok(out)
        };
        let compiled = match &rule {
            MatchRule::Any(words) => Compiled::Any(keywords(words)?),
            MatchRule::All(words) => Compiled::All(keywords(words)?),
            MatchRule::Regex(pattern) => Compiled::Regex(
                RegexBuilder::new(pattern)
                    .case_insensitive(true)
                    .build()
                    .map_err(|e| e.to_string())?,
            ),
        };
        Ok(Matcher { rule, compiled })
    }

    pub fn any<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        Matcher::new(MatchRule::Any(words.into_iter().map(Into::into).collect()))
            .expect("non-empty keyword list")
    }

    pub fn rule(&self) -> &MatchRule {
        &self.rule
    }

    /// `normalized` must already be passed through [`normalize`].
    pub fn matches_normalized(&self, normalized: &str) -> bool {
        match &self.compiled {
            Compiled::Any(words) => words.iter().any(|w| normalized.contains(w.as_str())),
            Compiled::All(words) => words.iter().all(|w| normalized.contains(w.as_str())),
            Compiled::Regex(re) => re.is_match(normalized),
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        self.matches_normalized(&normalize(text))
    }
}

impl PartialEq for Matcher {
    fn eq(&self, other: &Self) -> bool {
        self.rule == other.rule
    }
}

impl TryFrom<MatchRule> for Matcher {
    type Error = String;

    fn try_from(rule: MatchRule) -> Result<Self, Self::Error> {
        Matcher::new(rule)
    }
}

impl From<Matcher> for MatchRule {
    fn from(m: Matcher) -> MatchRule {
        m.rule
    }
}

/// Skill emitted when a checkpoint is satisfied in a successful sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub name: String,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: String,
    pub pattern: Matcher,
    #[serde(default)]
    pub primary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<SkillSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub id: String,
    pub pattern: Matcher,
    /// Filled from the enclosing task on load.
    #[serde(default)]
    pub task_category: String,
}

/// Structural check on the final output. Emits a `validation` trace event
/// that reads "<id>: passed" or "<id>: <message>".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputValidator {
    pub id: String,
    /// Must match the output for the validator to pass.
    pub require: Matcher,
    /// Failure message; keep it matching the schema-failure detector.
    #[serde(default = "default_validator_message")]
    pub message: String,
}

fn default_validator_message() -> String {
    "schema validation failed".into()
}

impl OutputValidator {
    pub fn event_payload(&self, output: &str) -> String {
        if self.require.matches(output) {
            format!("{}: passed", self.id)
        } else {
            format!("{}: {}", self.id, self.message)
        }
    }
}

/// Seed entry for the fact store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSeed {
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub category_id: String,
    pub description: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub deadline_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    pub rubric: Vec<Checkpoint>,
    #[serde(default)]
    pub signals: Vec<SignalSpec>,
    #[serde(default)]
    pub checklist_steps: Vec<String>,
    pub prompt_variants: Vec<String>,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default)]
    pub validators: Vec<OutputValidator>,
    #[serde(default)]
    pub facts: Vec<FactSeed>,
}

fn default_max_tokens() -> u32 {
    4096
}

fn default_rounds() -> u32 {
    ROUNDS
}

impl TaskDefinition {
    /// Normalizes tags (adding the category slug) and fills signal categories.
    pub fn prepare(&mut self) {
        let mut tags = std::mem::take(&mut self.tags);
        tags.push(self.category_id.clone());
        self.tags = normalize_tags(tags);
        for signal in &mut self.signals {
            signal.task_category = self.category_id.clone();
        }
    }

    pub fn check(&self) -> Result<(), SuiteError> {
        let bad = |reason: String| SuiteError::InvalidTask {
            task: self.category_id.clone(),
            reason,
        };
        if self.category_id.trim().is_empty() {
            return Err(bad("empty category id".into()));
        }
        if self.prompt_variants.len() != VARIANTS as usize {
            return Err(bad(format!(
                "expected {VARIANTS} prompt variants, found {}",
                self.prompt_variants.len()
            )));
        }
        if self.rounds != ROUNDS {
            return Err(bad(format!(
                "expected {ROUNDS} rounds, found {}",
                self.rounds
            )));
        }
        if self.rubric.len() != CHECKPOINTS_PER_RUBRIC {
            return Err(bad(format!(
                "expected {CHECKPOINTS_PER_RUBRIC} rubric checkpoints, found {}",
                self.rubric.len()
            )));
        }
        let primaries = self.rubric.iter().filter(|c| c.primary).count();
        if primaries != 1 {
            return Err(bad(format!(
                "expected exactly one primary checkpoint, found {primaries}"
            )));
        }
        let ids: BTreeSet<&str> = self.rubric.iter().map(|c| c.id.as_str()).collect();
        if ids.len() != self.rubric.len() {
            return Err(bad("duplicate checkpoint id".into()));
        }
        for c in &self.rubric {
            if let Some(skill) = &c.skill {
                if skill.name.trim().is_empty() || skill.steps.is_empty() {
                    return Err(bad(format!("checkpoint `{}` has an empty skill", c.id)));
                }
            }
        }
        if self.deadline_ms == 0 {
            return Err(bad("deadline_ms must be positive".into()));
        }
        if self.facts.iter().any(|f| f.text.trim().is_empty()) {
            return Err(bad("empty seed fact".into()));
        }
        Ok(())
    }

    pub fn primary(&self) -> &Checkpoint {
        self.rubric
            .iter()
            .find(|c| c.primary)
            .expect("validated rubric has a primary checkpoint")
    }

    /// The 15 protocol samples in (round, variant) order.
    pub fn samples(&self) -> Vec<TaskSample> {
        let mut out = Vec::with_capacity(SAMPLES_PER_TASK);
        for round in 1..=self.rounds {
            for variant in 1..=self.prompt_variants.len() as u32 {
                out.push(self.sample(round, variant));
            }
        }
        out
    }

    pub fn sample(&self, round: u32, variant: u32) -> TaskSample {
        let prompt = &self.prompt_variants[(variant - 1) as usize];
        TaskSample {
            sample_id: TaskSample::id_for(&self.category_id, round, variant),
            task_category: self.category_id.clone(),
            round,
            variant,
            task_text: format!("{}\n\n{}", self.description.trim(), prompt.trim()),
        }
    }
}

/// One (round, variant) evaluation instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub sample_id: String,
    pub task_category: String,
    pub round: u32,
    pub variant: u32,
    pub task_text: String,
}

impl TaskSample {
    pub fn id_for(category: &str, round: u32, variant: u32) -> String {
        format!("{category}/r{round}v{variant}")
    }

    /// Position in the protocol order, starting at 0.
    pub fn ordinal(&self) -> u64 {
        u64::from(self.round.saturating_sub(1)) * u64::from(VARIANTS)
            + u64::from(self.variant.saturating_sub(1))
    }
}

/// Whole suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    #[serde(default = "default_suite_version")]
    pub suite_version: u32,
    pub tasks: Vec<TaskDefinition>,
    #[serde(default = "default_few_shot_k")]
    pub few_shot_k: usize,
    #[serde(default = "default_budget")]
    pub budget_chars: usize,
    #[serde(default = "default_diagnostics")]
    pub diagnostics: Vec<String>,
    #[serde(default)]
    pub difficulty_weights: DifficultyWeights,
    #[serde(default)]
    pub detectors: DetectorTable,
    #[serde(default)]
    pub constraint_templates: ConstraintTemplates,
}

fn default_suite_version() -> u32 {
    1
}

fn default_few_shot_k() -> usize {
    3
}

fn default_budget() -> usize {
    8000
}

fn default_diagnostics() -> Vec<String> {
    vec!["enterprise_rag".into(), "tool_orchestration".into()]
}

impl Suite {
    pub fn from_json(text: &str) -> Result<Suite, SuiteError> {
        let mut suite: Suite =
            serde_json::from_str(text).map_err(|e| SuiteError::Parse(e.to_string()))?;
        for task in &mut suite.tasks {
            task.prepare();
            task.check()?;
        }
        let ids: BTreeSet<&str> = suite.tasks.iter().map(|t| t.category_id.as_str()).collect();
        if ids.len() != suite.tasks.len() {
            return Err(SuiteError::Invalid("duplicate task category".into()));
        }
        if suite.few_shot_k == 0 {
            return Err(SuiteError::Invalid("few_shot_k must be at least 1".into()));
        }
        for d in &suite.diagnostics {
            if !ids.contains(d.as_str()) {
                return Err(SuiteError::Invalid(format!(
                    "diagnostic task `{d}` not in suite"
                )));
            }
        }
        crate::update::FailureDetectors::new(suite.detectors.clone())
            .map_err(|e| SuiteError::Invalid(format!("detector pattern: {e}")))?;
        suite
            .difficulty_weights
            .check()
            .map_err(SuiteError::Invalid)?;
        Ok(suite)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Suite, SuiteError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SuiteError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Suite::from_json(&text)
    }

    pub fn task(&self, category: &str) -> Result<&TaskDefinition, SuiteError> {
        self.tasks
            .iter()
            .find(|t| t.category_id == category)
            .ok_or_else(|| SuiteError::UnknownTask(category.to_string()))
    }

    /// True when every one of the six benchmark categories is present.
    pub fn is_complete(&self) -> bool {
        CATEGORIES.iter().all(|c| self.task(c).is_ok())
    }

    /// SHA-256 of the canonical JSON form; recorded in reports.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("suite serializes");
        sha256_hex(canonical_json(&value).as_bytes())
    }

    /// A bank holding every task's seed facts and nothing else.
    pub fn seed_bank(&self, agent_id: &str) -> MemoryBank {
        let mut bank = MemoryBank::new(agent_id);
        for task in &self.tasks {
            for seed in &task.facts {
                let mut tags = seed.tags.clone();
                tags.push(task.category_id.clone());
                let fact = KnowledgeFact::new(seed.text.clone(), tags, "seed", 0);
                bank.insert(Entry::Fact(fact))
                    .expect("seed facts validated on load");
            }
        }
        bank
    }

    /// All signal specs keyed by id.
    pub fn signals(&self) -> BTreeMap<&str, &SignalSpec> {
        self.tasks
            .iter()
            .flat_map(|t| t.signals.iter())
            .map(|s| (s.id.as_str(), s))
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Minimal valid task for unit tests.
    pub fn task(category: &str) -> TaskDefinition {
        let mut t = TaskDefinition {
            category_id: category.into(),
            description: format!("Analyze a failing {category} system."),
            tags: vec!["schema".into(), "budget".into()],
            deadline_ms: 60_000,
            max_tokens: 1024,
            rubric: vec![
                Checkpoint {
                    id: "termination".into(),
                    pattern: Matcher::any(["termination condition"]),
                    primary: true,
                    skill: None,
                },
                Checkpoint {
                    id: "budget_control".into(),
                    pattern: Matcher::any(["budget cap"]),
                    primary: false,
                    skill: None,
                },
                Checkpoint {
                    id: "schema_validation".into(),
                    pattern: Matcher::any(["schema validation"]),
                    primary: false,
                    skill: Some(SkillSpec {
                        name: "validate-before-emit".into(),
                        steps: vec![
                            "Validate tool arguments against the schema".into(),
                            "Emit only validated output".into(),
                        ],
                    }),
                },
                Checkpoint {
                    id: "loop_recovery".into(),
                    pattern: Matcher::new(MatchRule::Regex(r"loop (guard|recovery)".into()))
                        .unwrap(),
                    primary: false,
                    skill: None,
                },
            ],
            signals: vec![SignalSpec {
                id: "termination".into(),
                pattern: Matcher::any(["explicit stop rule"]),
                task_category: String::new(),
            }],
            checklist_steps: vec!["Reproduce".into(), "Diagnose".into(), "Fix".into()],
            prompt_variants: (1..=5)
                .map(|i| format!("Variant {i} of the request."))
                .collect(),
            rounds: ROUNDS,
            validators: vec![OutputValidator {
                id: "plan_section".into(),
                require: Matcher::any(["remediation plan:"]),
                message: default_validator_message(),
            }],
            facts: vec![FactSeed {
                text: "Tool calls cost budget.".into(),
                tags: vec!["budget".into()],
            }],
        };
        t.prepare();
        t.check().unwrap();
        t
    }
}
