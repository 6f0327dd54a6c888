//! The four structured experience stores and their on-disk bank format.
//!
//! A [`MemoryBank`] holds domain facts, behavioral constraints, skill
//! templates and case records for one agent. Banks are values: every
//! operation returns a new bank and leaves its input untouched.
//!
//! Entry identity is content-derived (see [`crate::text::entry_id`]), so the
//! same lesson learned twice is stored once.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::context::score_relevance;
use crate::text::{entry_id, normalize, normalize_tags, tags_are_normalized};
use crate::update::FailureKind;

/// Bank document format version written by [`MemoryBank::serialize`].
pub const SCHEMA_VERSION: u32 = 1;

/// Milliseconds since the Unix epoch.
pub type Timestamp = u64;

/// Minimum rubric score a successful case can carry.
pub const SUCCESS_SCORE_THRESHOLD: u8 = 3;

/// Maximum rubric score.
pub const MAX_SCORE: u8 = 4;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BankError {
    #[error("malformed entry: {0}")]
    MalformedEntry(String),
    #[error("unsupported bank schema version {0} (supported: {SCHEMA_VERSION})")]
    UnsupportedVersion(u64),
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
}

/// One of the four memory modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Fact,
    Constraint,
    Skill,
    Curriculum,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [
        ModuleKind::Fact,
        ModuleKind::Constraint,
        ModuleKind::Skill,
        ModuleKind::Curriculum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Fact => "fact",
            ModuleKind::Constraint => "constraint",
            ModuleKind::Skill => "skill",
            ModuleKind::Curriculum => "curriculum",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fact" | "facts" | "m_f" | "mf" => Ok(ModuleKind::Fact),
            "constraint" | "constraints" | "m_s" | "ms" => Ok(ModuleKind::Constraint),
            "skill" | "skills" | "m_k" | "mk" => Ok(ModuleKind::Skill),
            "curriculum" | "case" | "cases" | "m_c" | "mc" => Ok(ModuleKind::Curriculum),
            other => Err(format!("unknown module kind `{other}`")),
        }
    }
}

/// Stable background knowledge about the task domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeFact {
    pub id: String,
    pub text: String,
    pub tags: Vec<String>,
    pub source_case: String,
    pub created_at: Timestamp,
}

impl KnowledgeFact {
    pub fn new<S: AsRef<str>>(
        text: impl Into<String>,
        tags: impl IntoIterator<Item = S>,
        source_case: impl Into<String>,
        created_at: Timestamp,
    ) -> Self {
        let text = text.into();
        KnowledgeFact {
            id: entry_id("fact", &text),
            text,
            tags: normalize_tags(tags),
            source_case: source_case.into(),
            created_at,
        }
    }
}

/// An imperative behavioral rule, usually distilled from a failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRule {
    pub id: String,
    pub text: String,
    pub trigger_failure: Option<FailureKind>,
    pub tags: Vec<String>,
    pub source_case: String,
    pub created_at: Timestamp,
}

impl ConstraintRule {
    pub fn new<S: AsRef<str>>(
        text: impl Into<String>,
        trigger_failure: Option<FailureKind>,
        tags: impl IntoIterator<Item = S>,
        source_case: impl Into<String>,
        created_at: Timestamp,
    ) -> Self {
        let text = text.into();
        ConstraintRule {
            id: entry_id("rule", &text),
            text,
            trigger_failure,
            tags: normalize_tags(tags),
            source_case: source_case.into(),
            created_at,
        }
    }
}

/// A reusable method template validated by one or more successful cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTemplate {
    pub id: String,
    pub name: String,
    pub steps: Vec<String>,
    pub applicability_tags: Vec<String>,
    pub validation_count: u32,
}

impl SkillTemplate {
    pub fn new<S: AsRef<str>>(
        name: impl Into<String>,
        steps: Vec<String>,
        applicability_tags: impl IntoIterator<Item = S>,
    ) -> Self {
        let name = name.into();
        SkillTemplate {
            id: entry_id("skill", &name),
            name,
            steps,
            applicability_tags: normalize_tags(applicability_tags),
            validation_count: 1,
        }
    }
}

/// One executed case, as remembered by the curriculum store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub task_category: String,
    pub summary: String,
    pub difficulty: f64,
    pub success: bool,
    pub score: u8,
    pub duration_ms: u64,
    pub failure_kinds: Vec<FailureKind>,
    pub created_at: Timestamp,
}

/// A value destined for one of the four stores.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Fact(KnowledgeFact),
    Constraint(ConstraintRule),
    Skill(SkillTemplate),
    Case(CaseRecord),
}

impl Entry {
    pub fn kind(&self) -> ModuleKind {
        match self {
            Entry::Fact(_) => ModuleKind::Fact,
            Entry::Constraint(_) => ModuleKind::Constraint,
            Entry::Skill(_) => ModuleKind::Skill,
            Entry::Case(_) => ModuleKind::Curriculum,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Entry::Fact(e) => e.entry_id(),
            Entry::Constraint(e) => e.entry_id(),
            Entry::Skill(e) => e.entry_id(),
            Entry::Case(e) => e.entry_id(),
        }
    }
}

/// Borrowed view of a stored entry, returned by [`MemoryBank::query`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryRef<'a> {
    Fact(&'a KnowledgeFact),
    Constraint(&'a ConstraintRule),
    Skill(&'a SkillTemplate),
    Case(&'a CaseRecord),
}

impl EntryRef<'_> {
    pub fn id(&self) -> &str {
        match self {
            EntryRef::Fact(e) => e.entry_id(),
            EntryRef::Constraint(e) => e.entry_id(),
            EntryRef::Skill(e) => e.entry_id(),
            EntryRef::Case(e) => e.entry_id(),
        }
    }
}

/// Common surface the relevance query needs from every store.
pub trait MemoryEntry {
    fn entry_id(&self) -> &str;
    fn relevance_tags(&self) -> Cow<'_, [String]>;
    /// Used only to break relevance ties.
    fn created_at(&self) -> Timestamp;
}

impl MemoryEntry for KnowledgeFact {
    fn entry_id(&self) -> &str {
        &self.id
    }
    fn relevance_tags(&self) -> Cow<'_, [String]> {
        Cow::Borrowed(&self.tags)
    }
    fn created_at(&self) -> Timestamp {
        self.created_at
    }
}

impl MemoryEntry for ConstraintRule {
    fn entry_id(&self) -> &str {
        &self.id
    }
    fn relevance_tags(&self) -> Cow<'_, [String]> {
        Cow::Borrowed(&self.tags)
    }
    fn created_at(&self) -> Timestamp {
        self.created_at
    }
}

impl MemoryEntry for SkillTemplate {
    fn entry_id(&self) -> &str {
        &self.id
    }
    fn relevance_tags(&self) -> Cow<'_, [String]> {
        Cow::Borrowed(&self.applicability_tags)
    }
    // Skills carry no timestamp; ties fall through to id order.
    fn created_at(&self) -> Timestamp {
        0
    }
}

impl MemoryEntry for CaseRecord {
    fn entry_id(&self) -> &str {
        &self.case_id
    }
    fn relevance_tags(&self) -> Cow<'_, [String]> {
        Cow::Owned(normalize_tags([self.task_category.as_str()]))
    }
    fn created_at(&self) -> Timestamp {
        self.created_at
    }
}

/// Ranks `store` against `task_tags`: descending relevance, then ascending
/// `created_at`, then ascending id. Returns at most `limit` entries paired
/// with their scores.
pub fn rank<'a, T: MemoryEntry, S: AsRef<str>>(
    store: &'a [T],
    task_tags: &[S],
    limit: usize,
) -> Vec<(&'a T, f64)> {
    let mut scored: Vec<(&T, f64)> = store
        .iter()
        .map(|e| (e, score_relevance(&e.relevance_tags(), task_tags)))
        .collect();
    scored.sort_by(|(a, sa), (b, sb)| {
        sb.total_cmp(sa)
            .then_with(|| a.created_at().cmp(&b.created_at()))
            .then_with(|| a.entry_id().cmp(b.entry_id()))
    });
    scored.truncate(limit);
    scored
}

/// What [`MemoryBank::insert`] did with an entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    Added,
    /// Skill already present; its validation count went up by one.
    Incremented,
    /// Same id already stored; the existing entry was kept.
    Kept,
}

/// An agent's four experience stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub schema_version: u32,
    pub agent_id: String,
    pub facts: Vec<KnowledgeFact>,
    pub constraints: Vec<ConstraintRule>,
    pub skills: Vec<SkillTemplate>,
    pub cases: Vec<CaseRecord>,
}

impl MemoryBank {
    pub fn new(agent_id: impl Into<String>) -> Self {
        MemoryBank {
            schema_version: SCHEMA_VERSION,
            agent_id: agent_id.into(),
            facts: Vec::new(),
            constraints: Vec::new(),
            skills: Vec::new(),
            cases: Vec::new(),
        }
    }

    pub fn len(&self, kind: ModuleKind) -> usize {
        match kind {
            ModuleKind::Fact => self.facts.len(),
            ModuleKind::Constraint => self.constraints.len(),
            ModuleKind::Skill => self.skills.len(),
            ModuleKind::Curriculum => self.cases.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        ModuleKind::ALL.iter().all(|k| self.len(*k) == 0)
    }

    pub fn contains(&self, kind: ModuleKind, id: &str) -> bool {
        match kind {
            ModuleKind::Fact => self.facts.iter().any(|e| e.id == id),
            ModuleKind::Constraint => self.constraints.iter().any(|e| e.id == id),
            ModuleKind::Skill => self.skills.iter().any(|e| e.id == id),
            ModuleKind::Curriculum => self.cases.iter().any(|e| e.case_id == id),
        }
    }

    pub fn skill(&self, id: &str) -> Option<&SkillTemplate> {
        self.skills.iter().find(|s| s.id == id)
    }

    /// Returns a bank that also contains `entry`. Duplicate ids keep the
    /// stored entry, except skills, whose validation count is incremented.
    pub fn add_entry(&self, entry: Entry) -> Result<MemoryBank, BankError> {
        let mut next = self.clone();
        next.insert(entry)?;
        Ok(next)
    }

    /// In-place form of [`add_entry`](Self::add_entry) for the bank's owner.
    pub fn insert(&mut self, entry: Entry) -> Result<Insertion, BankError> {
        check_entry(&entry)?;
        let id = entry.id().to_string();
        let kind = entry.kind();
        if self.contains(kind, &id) {
            if let Entry::Skill(_) = entry {
                let skill = self
                    .skills
                    .iter_mut()
                    .find(|s| s.id == id)
                    .expect("contains() just matched");
                skill.validation_count = skill.validation_count.saturating_add(1);
                return Ok(Insertion::Incremented);
            }
            return Ok(Insertion::Kept);
        }
        match entry {
            Entry::Fact(e) => self.facts.push(e),
            Entry::Constraint(e) => self.constraints.push(e),
            Entry::Skill(e) => self.skills.push(e),
            Entry::Case(e) => self.cases.push(e),
        }
        Ok(Insertion::Added)
    }

    /// Entries of `kind` ranked by tag relevance to `task_tags`.
    pub fn query<S: AsRef<str>>(
        &self,
        kind: ModuleKind,
        task_tags: &[S],
        limit: usize,
    ) -> Vec<EntryRef<'_>> {
        match kind {
            ModuleKind::Fact => rank(&self.facts, task_tags, limit)
                .into_iter()
                .map(|(e, _)| EntryRef::Fact(e))
                .collect(),
            ModuleKind::Constraint => rank(&self.constraints, task_tags, limit)
                .into_iter()
                .map(|(e, _)| EntryRef::Constraint(e))
                .collect(),
            ModuleKind::Skill => rank(&self.skills, task_tags, limit)
                .into_iter()
                .map(|(e, _)| EntryRef::Skill(e))
                .collect(),
            ModuleKind::Curriculum => rank(&self.cases, task_tags, limit)
                .into_iter()
                .map(|(e, _)| EntryRef::Case(e))
                .collect(),
        }
    }

    /// Copy of this bank with every store in `drop` emptied.
    pub fn ablate(&self, drop: &BTreeSet<ModuleKind>) -> MemoryBank {
        let mut out = self.clone();
        for kind in drop {
            match kind {
                ModuleKind::Fact => out.facts.clear(),
                ModuleKind::Constraint => out.constraints.clear(),
                ModuleKind::Skill => out.skills.clear(),
                ModuleKind::Curriculum => out.cases.clear(),
            }
        }
        out
    }

    /// Canonical JSON: object keys sorted, list order preserved, two-space
    /// indentation, trailing newline.
    pub fn serialize(&self) -> String {
        let value = serde_json::to_value(self).expect("bank serializes to JSON");
        canonical_json(&value)
    }

    /// Parses and validates a bank document.
    pub fn deserialize(document: &str) -> Result<MemoryBank, BankError> {
        let value: Value = serde_json::from_str(document)
            .map_err(|e| BankError::CorruptBundle(format!("invalid JSON: {e}")))?;
        MemoryBank::from_value(value)
    }

    pub(crate) fn from_value(value: Value) -> Result<MemoryBank, BankError> {
        let version = value
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| BankError::CorruptBundle("missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(BankError::UnsupportedVersion(version));
        }
        let bank: MemoryBank =
            serde_json::from_value(value).map_err(|e| BankError::CorruptBundle(e.to_string()))?;
        bank.validate()
            .map_err(|e| BankError::CorruptBundle(e.to_string()))?;
        Ok(bank)
    }

    /// Checks every per-entry invariant plus id uniqueness within each store.
    pub fn validate(&self) -> Result<(), BankError> {
        fn unique<'a>(
            kind: ModuleKind,
            ids: impl Iterator<Item = &'a str>,
        ) -> Result<(), BankError> {
            let mut seen = HashSet::new();
            for id in ids {
                if !seen.insert(id) {
                    return Err(BankError::MalformedEntry(format!(
                        "duplicate {kind} id {id}"
                    )));
                }
            }
            Ok(())
        }
        for e in &self.facts {
            check_entry(&Entry::Fact(e.clone()))?;
        }
        for e in &self.constraints {
            check_entry(&Entry::Constraint(e.clone()))?;
        }
        for e in &self.skills {
            check_entry(&Entry::Skill(e.clone()))?;
        }
        for e in &self.cases {
            check_entry(&Entry::Case(e.clone()))?;
        }
        unique(ModuleKind::Fact, self.facts.iter().map(|e| e.id.as_str()))?;
        unique(
            ModuleKind::Constraint,
            self.constraints.iter().map(|e| e.id.as_str()),
        )?;
        unique(ModuleKind::Skill, self.skills.iter().map(|e| e.id.as_str()))?;
        unique(
            ModuleKind::Curriculum,
            self.cases.iter().map(|e| e.case_id.as_str()),
        )?;
        Ok(())
    }
}

fn check_entry(entry: &Entry) -> Result<(), BankError> {
    let bad = |msg: String| Err(BankError::MalformedEntry(msg));
    match entry {
        Entry::Fact(f) => {
            if normalize(&f.text).is_empty() {
                return bad("fact text is empty".into());
            }
            if f.id != entry_id("fact", &f.text) {
                return bad(format!("fact id {} does not match its text", f.id));
            }
            if !tags_are_normalized(&f.tags) {
                return bad(format!("fact {} has unnormalized tags", f.id));
            }
        }
        Entry::Constraint(c) => {
            if normalize(&c.text).is_empty() {
                return bad("constraint text is empty".into());
            }
            if c.id != entry_id("rule", &c.text) {
                return bad(format!("constraint id {} does not match its text", c.id));
            }
            if !tags_are_normalized(&c.tags) {
                return bad(format!("constraint {} has unnormalized tags", c.id));
            }
            if let Some(kind) = &c.trigger_failure {
                kind.check()
                    .map_err(|e| BankError::MalformedEntry(e.to_string()))?;
            }
        }
        Entry::Skill(s) => {
            if normalize(&s.name).is_empty() {
                return bad("skill name is empty".into());
            }
            if s.steps.is_empty() || s.steps.iter().any(|st| normalize(st).is_empty()) {
                return bad(format!("skill `{}` has no steps or an empty step", s.name));
            }
            if s.id != entry_id("skill", &s.name) {
                return bad(format!("skill id {} does not match its name", s.id));
            }
            if s.validation_count == 0 {
                return bad(format!("skill `{}` has validation_count 0", s.name));
            }
            if !tags_are_normalized(&s.applicability_tags) {
                return bad(format!("skill `{}` has unnormalized tags", s.name));
            }
        }
        Entry::Case(c) => {
            if c.case_id.trim().is_empty() {
                return bad("case id is empty".into());
            }
            if !(0.0..=1.0).contains(&c.difficulty) {
                return bad(format!(
                    "case {} difficulty {} outside [0,1]",
                    c.case_id, c.difficulty
                ));
            }
            if c.score > MAX_SCORE {
                return bad(format!(
                    "case {} score {} above {MAX_SCORE}",
                    c.case_id, c.score
                ));
            }
            if c.success && c.score < SUCCESS_SCORE_THRESHOLD {
                return bad(format!(
                    "case {} marked successful with score {}",
                    c.case_id, c.score
                ));
            }
            for kind in &c.failure_kinds {
                kind.check()
                    .map_err(|e| BankError::MalformedEntry(e.to_string()))?;
            }
        }
    }
    Ok(())
}

/// Pretty-prints `value` with object keys in sorted order regardless of how
/// `serde_json` was configured by other crates in the build.
pub fn canonical_json(value: &Value) -> String {
    let mut out = serde_json::to_string_pretty(&sorted(value)).expect("JSON value serializes");
    out.push('\n');
    out
}

fn sorted(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = serde_json::Map::new();
            for k in keys {
                out.insert(k.clone(), sorted(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
        other => other.clone(),
    }
}
