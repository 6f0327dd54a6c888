//! Prompt context assembly for the case-based method and the four baselines.
//!
//! Every strategy produces a [`PromptContext`]: ordered labeled sections
//! followed by the task text. Section bodies are lists of lines; each line
//! costs its character count plus one for the newline, and a section never
//! includes a line that would overflow the remaining budget.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curriculum::{order_cases, render_case_line, select_for_context};
use crate::memory::{rank, CaseRecord, MemoryBank, MemoryEntry};
use crate::suite::{TaskDefinition, TaskSample};
use crate::text::normalize;

pub const LABEL_FACTS: &str = "DOMAIN KNOWLEDGE";
pub const LABEL_CONSTRAINTS: &str = "CONSTRAINTS";
pub const LABEL_SKILLS: &str = "SKILLS";
pub const LABEL_CASES: &str = "PRIOR CASES";
pub const LABEL_EXAMPLES: &str = "EXAMPLES";
pub const LABEL_CHECKLIST: &str = "CHECKLIST";
pub const LABEL_RULES: &str = "RULES";

pub const DEFAULT_FEW_SHOT_K: usize = 3;

/// Context assembly policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    Cbl,
    ZeroShot,
    FewShot { k: usize },
    Checklist,
    RuleMemory,
}

impl Strategy {
    /// The four baselines in their conventional order.
    pub const BASELINES: [Strategy; 4] = [
        Strategy::ZeroShot,
        Strategy::FewShot {
            k: DEFAULT_FEW_SHOT_K,
        },
        Strategy::Checklist,
        Strategy::RuleMemory,
    ];

    pub fn is_baseline(&self) -> bool {
        !matches!(self, Strategy::Cbl)
    }

    /// Name without parameters, used for fixture lookup and tie-breaks.
    pub fn slug(&self) -> &'static str {
        match self {
            Strategy::Cbl => "cbl",
            Strategy::ZeroShot => "zero-shot",
            Strategy::FewShot { .. } => "few-shot",
            Strategy::Checklist => "checklist",
            Strategy::RuleMemory => "rule-memory",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FewShot { k } if *k != DEFAULT_FEW_SHOT_K => write!(f, "few-shot:{k}"),
            other => f.write_str(other.slug()),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_ascii_lowercase().replace('_', "-");
        let (name, param) = match lowered.split_once(':') {
            Some((n, p)) => (n.to_string(), Some(p.to_string())),
            None => (lowered, None),
        };
        let strategy = match name.as_str() {
            "cbl" | "case-based" => Strategy::Cbl,
            "zero-shot" | "zeroshot" => Strategy::ZeroShot,
            "few-shot" | "fewshot" => {
                let k = match param.as_deref() {
                    None => DEFAULT_FEW_SHOT_K,
                    Some(p) => p.parse().map_err(|_| format!("bad few-shot k `{p}`"))?,
                };
                if k == 0 {
                    return Err("few-shot k must be at least 1".into());
                }
                return Ok(Strategy::FewShot { k });
            }
            "checklist" => Strategy::Checklist,
            "rule-memory" | "rulememory" | "rules" => Strategy::RuleMemory,
            _ => return Err(format!("unknown strategy `{s}`")),
        };
        if param.is_some() {
            return Err(format!("strategy `{name}` takes no parameter"));
        }
        Ok(strategy)
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum AssembleError {
    #[error("budget of {budget} chars cannot hold the {needed}-char task text")]
    BudgetTooSmall { budget: usize, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub label: String,
    pub body: String,
}

/// Sectioned context ready for rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub sections: Vec<Section>,
    pub task_text: String,
    pub strategy: Strategy,
    /// Characters in all section bodies plus the task text.
    pub char_count: usize,
}

impl PromptContext {
    pub fn section(&self, label: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.label == label)
    }
}

/// Jaccard overlap of the normalized tag sets.
pub fn score_relevance<A: AsRef<str>, B: AsRef<str>>(entry_tags: &[A], task_tags: &[B]) -> f64 {
    let a: BTreeSet<String> = entry_tags.iter().map(|t| normalize(t.as_ref())).collect();
    let b: BTreeSet<String> = task_tags.iter().map(|t| normalize(t.as_ref())).collect();
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    inter as f64 / union.max(1) as f64
}

/// Budget cost of one rendered line.
pub fn line_cost(line: &str) -> usize {
    line.chars().count() + 1
}

/// Greedy prefix of `lines` that fits in `remaining`; deducts what it uses.
fn take_lines(lines: impl IntoIterator<Item = String>, remaining: &mut usize) -> Vec<String> {
    let mut out = Vec::new();
    for line in lines {
        let cost = line_cost(&line);
        if cost > *remaining {
            break;
        }
        *remaining -= cost;
        out.push(line);
    }
    out
}

fn relevant<'a, T: MemoryEntry>(store: &'a [T], tags: &[String]) -> Vec<&'a T> {
    rank(store, tags, store.len())
        .into_iter()
        .filter(|(_, score)| *score > 0.0)
        .map(|(e, _)| e)
        .collect()
}

fn bullet(text: &str) -> String {
    format!("- {}", text.trim())
}

/// Builds the context `strategy` prescribes for `sample`.
///
/// Each strategy reads only its own sources: zero-shot reads nothing,
/// few-shot the case store, checklist the task's configured steps, rule
/// memory the constraint store, and the case-based method all four stores.
pub fn assemble(
    bank: &MemoryBank,
    task: &TaskDefinition,
    sample: &TaskSample,
    strategy: Strategy,
    budget_chars: usize,
) -> Result<PromptContext, AssembleError> {
    let task_chars = sample.task_text.chars().count();
    if budget_chars < task_chars {
        return Err(AssembleError::BudgetTooSmall {
            budget: budget_chars,
            needed: task_chars,
        });
    }
    let mut remaining = budget_chars - task_chars;
    let tags = &task.tags;

    let sections: Vec<(&str, Vec<String>)> = match strategy {
        Strategy::ZeroShot => Vec::new(),
        Strategy::FewShot { k } => {
            let examples = rank(&bank.cases, tags, k)
                .into_iter()
                .filter(|(_, score)| *score > 0.0)
                .map(|(c, _)| render_case_line(c));
            vec![(LABEL_EXAMPLES, take_lines(examples, &mut remaining))]
        }
        Strategy::Checklist => {
            let steps = task
                .checklist_steps
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{}. {}", i + 1, s.trim()));
            vec![(LABEL_CHECKLIST, take_lines(steps, &mut remaining))]
        }
        Strategy::RuleMemory => {
            let category = normalize(&task.category_id);
            let rules = rank(&bank.constraints, tags, bank.constraints.len())
                .into_iter()
                .filter(|(c, _)| c.tags.contains(&category))
                .map(|(c, _)| bullet(&c.text));
            vec![(LABEL_RULES, take_lines(rules, &mut remaining))]
        }
        Strategy::Cbl => {
            // Budget priority: constraints, facts, skills, cases.
            let constraints = take_lines(
                relevant(&bank.constraints, tags)
                    .into_iter()
                    .map(|c| bullet(&c.text)),
                &mut remaining,
            );
            let facts = take_lines(
                relevant(&bank.facts, tags)
                    .into_iter()
                    .map(|f| bullet(&f.text)),
                &mut remaining,
            );
            let skills = take_lines(
                relevant(&bank.skills, tags).into_iter().map(|s| {
                    format!(
                        "- {} (validated {}x): {}",
                        s.name.trim(),
                        s.validation_count,
                        s.steps
                            .iter()
                            .map(|st| st.trim())
                            .collect::<Vec<_>>()
                            .join("; ")
                    )
                }),
                &mut remaining,
            );
            let pool: Vec<CaseRecord> = relevant(&bank.cases, tags).into_iter().cloned().collect();
            let chosen = select_for_context(&order_cases(&pool), &pool, remaining);
            let cases: Vec<String> = chosen.iter().map(render_case_line).collect();
            vec![
                (LABEL_FACTS, facts),
                (LABEL_CONSTRAINTS, constraints),
                (LABEL_SKILLS, skills),
                (LABEL_CASES, cases),
            ]
        }
    };
    let sections: Vec<Section> = sections
        .into_iter()
        .filter(|(_, lines)| !lines.is_empty())
        .map(|(label, lines)| Section {
            label: label.to_string(),
            body: lines.join("\n"),
        })
        .collect();
    let char_count = sections
        .iter()
        .map(|s| s.body.chars().count())
        .sum::<usize>()
        + task_chars;
    Ok(PromptContext {
        sections,
        task_text: sample.task_text.clone(),
        strategy,
        char_count,
    })
}

/// Canonical prompt text.
pub fn render(ctx: &PromptContext) -> String {
    let mut out = String::with_capacity(ctx.char_count + 16 * (ctx.sections.len() + 1));
    for section in &ctx.sections {
        out.push_str("## ");
        out.push_str(&section.label);
        out.push('\n');
        out.push_str(&section.body);
        out.push_str("\n\n");
    }
    out.push_str("## TASK\n");
    out.push_str(&ctx.task_text);
    out
}

/// Characters [`render`] adds on top of [`PromptContext::char_count`].
pub fn layout_overhead(ctx: &PromptContext) -> usize {
    ctx.sections
        .iter()
        .map(|s| "## ".len() + s.label.chars().count() + 1 + 2)
        .sum::<usize>()
        + "## TASK\n".len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{ConstraintRule, Entry, KnowledgeFact, SkillTemplate};
    use crate::suite::fixtures;
    use crate::update::FailureKind;

    fn case(id: &str, category: &str, difficulty: f64, at: u64) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            task_category: category.into(),
            summary: format!("summary of {id}"),
            difficulty,
            success: true,
            score: 4,
            duration_ms: 1,
            failure_kinds: vec![],
            created_at: at,
        }
    }

    /// 2 facts, 1 constraint, 1 skill, 2 cases, all relevant to tool_orchestration.
    fn fixture_bank() -> MemoryBank {
        let mut b = MemoryBank::new("agent-a");
        for e in [
            Entry::Fact(KnowledgeFact::new("Every tool call spends budget.", ["budget"], "seed", 1)),
            Entry::Fact(KnowledgeFact::new("Tool arguments follow a JSON schema.", ["schema", "tool_orchestration"], "seed", 2)),
            Entry::Constraint(ConstraintRule::new(
                "[tool_orchestration] After a schema validation failure, field formats should be rechecked before emitting output.",
                Some(FailureKind::SchemaValidationFailure),
                ["tool_orchestration", "schema_validation_failure"],
                "c0",
                3,
            )),
            Entry::Skill(SkillTemplate::new(
                "validate-before-emit",
                vec!["Validate arguments".into(), "Emit".into()],
                ["schema", "tool_orchestration"],
            )),
            Entry::Case(case("c2", "tool_orchestration", 0.5, 5)),
            Entry::Case(case("c1", "tool_orchestration", 0.1, 4)),
        ] {
            b.insert(e).unwrap();
        }
        b
    }

    fn sample() -> (TaskDefinition, TaskSample) {
        let task = fixtures::task("tool_orchestration");
        let s = task.sample(1, 1);
        (task, s)
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(score_relevance(&["a", "b"], &["b", "a"]), 1.0);
        assert_eq!(score_relevance(&["a"], &["b"]), 0.0);
        assert!((score_relevance(&["a", "b"], &["b", "c"]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(score_relevance::<&str, &str>(&[], &[]), 0.0);
        assert_eq!(score_relevance(&["A "], &["a"]), 1.0);
    }

    #[test]
    fn zero_shot_is_task_only() {
        let (task, s) = sample();
        let ctx = assemble(&fixture_bank(), &task, &s, Strategy::ZeroShot, 10_000).unwrap();
        assert!(ctx.sections.is_empty());
        assert_eq!(render(&ctx), format!("## TASK\n{}", s.task_text));
        assert_eq!(ctx.char_count, s.task_text.chars().count());
    }

    #[test]
    fn cbl_fixture_has_all_six_entries_in_order() {
        let (task, s) = sample();
        let ctx = assemble(&fixture_bank(), &task, &s, Strategy::Cbl, 10_000).unwrap();
        let labels: Vec<&str> = ctx.sections.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(
            labels,
            vec![LABEL_FACTS, LABEL_CONSTRAINTS, LABEL_SKILLS, LABEL_CASES]
        );
        let lines: usize = ctx.sections.iter().map(|s| s.body.lines().count()).sum();
        assert_eq!(lines, 6);
        // Fact tagged with both schema and the category ranks above the budget fact:
        // {schema, tool_orchestration} vs task {budget, schema, tool_orchestration} = 2/3 > 1/3.
        assert!(ctx.sections[0].body.starts_with("- Tool arguments"));
        // Curriculum puts the easier case first.
        assert!(ctx.sections[3].body.starts_with("- summary of c1"));
        let rendered = render(&ctx);
        assert_eq!(rendered, include_str!("../tests/golden/cbl_context.txt"));
        assert_eq!(rendered, render(&ctx));
    }

    #[test]
    fn cbl_without_facts_drops_section() {
        let (task, s) = sample();
        let bank = fixture_bank().ablate(&[crate::memory::ModuleKind::Fact].into());
        let ctx = assemble(&bank, &task, &s, Strategy::Cbl, 10_000).unwrap();
        assert!(ctx.section(LABEL_FACTS).is_none());
        assert!(ctx.section(LABEL_CONSTRAINTS).is_some());
    }

    #[test]
    fn baselines_read_their_sources() {
        let (task, s) = sample();
        let bank = fixture_bank();
        let few = assemble(&bank, &task, &s, Strategy::FewShot { k: 1 }, 10_000).unwrap();
        assert_eq!(few.sections.len(), 1);
        assert_eq!(few.sections[0].body.lines().count(), 1);
        let check = assemble(&bank, &task, &s, Strategy::Checklist, 10_000).unwrap();
        assert_eq!(check.sections[0].body, "1. Reproduce\n2. Diagnose\n3. Fix");
        let rules = assemble(&bank, &task, &s, Strategy::RuleMemory, 10_000).unwrap();
        assert_eq!(rules.sections[0].label, LABEL_RULES);
        assert!(rules.sections[0]
            .body
            .contains("field formats should be rechecked"));
    }

    #[test]
    fn budget_too_small() {
        let (task, s) = sample();
        let need = s.task_text.chars().count();
        assert_eq!(
            assemble(&fixture_bank(), &task, &s, Strategy::Cbl, need - 1),
            Err(AssembleError::BudgetTooSmall {
                budget: need - 1,
                needed: need
            })
        );
        let ctx = assemble(&fixture_bank(), &task, &s, Strategy::Cbl, need).unwrap();
        assert!(ctx.sections.is_empty());
    }

    #[test]
    fn tight_budget_keeps_constraints_first() {
        let (task, s) = sample();
        let bank = fixture_bank();
        let rule_cost = line_cost(&bullet(&bank.constraints[0].text));
        let budget = s.task_text.chars().count() + rule_cost;
        let ctx = assemble(&bank, &task, &s, Strategy::Cbl, budget).unwrap();
        assert_eq!(ctx.sections.len(), 1);
        assert_eq!(ctx.sections[0].label, LABEL_CONSTRAINTS);
        assert!(render(&ctx).chars().count() <= budget + layout_overhead(&ctx));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Cbl,
            Strategy::ZeroShot,
            Strategy::FewShot { k: 3 },
            Strategy::FewShot { k: 5 },
            Strategy::Checklist,
            Strategy::RuleMemory,
        ] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!(
            "few-shot".parse::<Strategy>().unwrap(),
            Strategy::FewShot { k: 3 }
        );
        assert!("few-shot:0".parse::<Strategy>().is_err());
        assert!("cbl:2".parse::<Strategy>().is_err());
        assert!("magic".parse::<Strategy>().is_err());
    }
}
