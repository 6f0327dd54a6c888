//! Random inputs and property checks shared by the test suites and the
//! acceptance runner. Each check returns the first violation it finds.

use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::{any, prop_oneof, Just};
use proptest::strategy::Strategy as Gen;

use crate::context::{
    assemble, render, PromptContext, Section, Strategy, LABEL_CASES, LABEL_CONSTRAINTS,
    LABEL_FACTS, LABEL_SKILLS,
};
use crate::curriculum::{order_cases, render_case_line, select_for_context};
use crate::memory::{
    CaseRecord, ConstraintRule, Entry, KnowledgeFact, MemoryBank, ModuleKind, SkillTemplate,
};
use crate::suite::{TaskDefinition, TaskSample, CATEGORIES};
use crate::transfer::{export_bundle, import_bundle};
use crate::update::FailureKind;

/// Budget large enough that nothing is ever truncated.
pub const AMPLE_BUDGET: usize = 1 << 20;

const TAGS: [&str; 14] = [
    "schema",
    "budget",
    "loops",
    "termination",
    "retrieval",
    "security",
    "rollout",
    "reward",
    "drift",
    "agents",
    "tools",
    "rag",
    "ops",
    "alignment",
];

fn arb_tags() -> impl Gen<Value = Vec<String>> {
    let pool: Vec<&'static str> = TAGS.iter().chain(CATEGORIES.iter()).copied().collect();
    proptest::sample::subsequence(pool, 0..4)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn arb_text() -> impl Gen<Value = String> {
    "[a-z]{2,8}( [a-z]{1,8}){0,6}"
}

fn arb_failure() -> impl Gen<Value = FailureKind> {
    prop_oneof![
        Just(FailureKind::Timeout),
        Just(FailureKind::RuntimeError),
        Just(FailureKind::BlankOutput),
        Just(FailureKind::LoopDetected),
        Just(FailureKind::SchemaValidationFailure),
        "[a-z]{3,6}".prop_map(FailureKind::Other),
    ]
}

pub fn arb_fact() -> impl Gen<Value = KnowledgeFact> {
    (arb_text(), arb_tags(), 0u64..10_000)
        .prop_map(|(text, tags, at)| KnowledgeFact::new(text, tags, "gen/seed", at))
}

pub fn arb_constraint() -> impl Gen<Value = ConstraintRule> {
    (
        arb_text(),
        proptest::option::of(arb_failure()),
        arb_tags(),
        0u64..10_000,
    )
        .prop_map(|(text, kind, tags, at)| ConstraintRule::new(text, kind, tags, "gen/case", at))
}

pub fn arb_skill() -> impl Gen<Value = SkillTemplate> {
    (arb_text(), vec(arb_text(), 1..4), arb_tags(), 1u32..6).prop_map(|(name, steps, tags, n)| {
        let mut s = SkillTemplate::new(name, steps, tags);
        s.validation_count = n;
        s
    })
}

/// A case without its id; [`arb_cases`] numbers them.
fn arb_case_body() -> impl Gen<Value = CaseRecord> {
    (
        proptest::sample::select(CATEGORIES.to_vec()),
        arb_text(),
        0u32..=20,
        0u8..=4,
        any::<bool>(),
        0u64..200_000,
        vec(arb_failure(), 0..3),
        0u64..10_000,
    )
        .prop_map(
            |(cat, summary, d, score, ok, duration, failures, at)| CaseRecord {
                case_id: String::new(),
                task_category: cat.to_string(),
                summary,
                // Twentieths, so equal difficulties occur and ties get exercised.
                difficulty: f64::from(d) / 20.0,
                success: ok && score >= 3,
                score,
                duration_ms: duration,
                failure_kinds: failures,
                created_at: at,
            },
        )
}

/// Case lists with distinct ids.
pub fn arb_cases(size: std::ops::Range<usize>) -> impl Gen<Value = Vec<CaseRecord>> {
    vec(arb_case_body(), size).prop_map(|cases| {
        cases
            .into_iter()
            .enumerate()
            .map(|(i, mut c)| {
                c.case_id = format!("gen/{}/{i}", c.task_category);
                c
            })
            .collect()
    })
}

/// Valid banks built through `insert`, so duplicates merge as they would
/// in use.
pub fn arb_bank() -> impl Gen<Value = MemoryBank> {
    (
        "[a-z]{1,6}",
        vec(arb_fact(), 0..6),
        vec(arb_constraint(), 0..6),
        vec(arb_skill(), 0..5),
        arb_cases(0..10),
    )
        .prop_map(|(agent, facts, constraints, skills, cases)| {
            let mut bank = MemoryBank::new(agent);
            let entries = facts
                .into_iter()
                .map(Entry::Fact)
                .chain(constraints.into_iter().map(Entry::Constraint))
                .chain(skills.into_iter().map(Entry::Skill))
                .chain(cases.into_iter().map(Entry::Case));
            for e in entries {
                bank.insert(e).expect("generated entries are valid");
            }
            bank
        })
}

/// Section label the case-based context uses for `kind`.
pub fn section_label(kind: ModuleKind) -> &'static str {
    match kind {
        ModuleKind::Fact => LABEL_FACTS,
        ModuleKind::Constraint => LABEL_CONSTRAINTS,
        ModuleKind::Skill => LABEL_SKILLS,
        ModuleKind::Curriculum => LABEL_CASES,
    }
}

/// Stores each strategy is allowed to read.
pub fn declared_stores(strategy: Strategy) -> BTreeSet<ModuleKind> {
    match strategy {
        Strategy::Cbl => ModuleKind::ALL.into_iter().collect(),
        Strategy::FewShot { .. } => BTreeSet::from([ModuleKind::Curriculum]),
        Strategy::RuleMemory => BTreeSet::from([ModuleKind::Constraint]),
        Strategy::ZeroShot | Strategy::Checklist => BTreeSet::new(),
    }
}

fn without(ctx: &PromptContext, label: &str) -> PromptContext {
    let sections: Vec<Section> = ctx
        .sections
        .iter()
        .filter(|s| s.label != label)
        .cloned()
        .collect();
    let char_count = sections
        .iter()
        .map(|s| s.body.chars().count())
        .sum::<usize>()
        + ctx.task_text.chars().count();
    PromptContext {
        sections,
        task_text: ctx.task_text.clone(),
        strategy: ctx.strategy,
        char_count,
    }
}

/// With an ample budget, ablating a store equals deleting its section.
pub fn check_ablation_correspondence(
    bank: &MemoryBank,
    task: &TaskDefinition,
    sample: &TaskSample,
) -> Result<(), String> {
    let full =
        assemble(bank, task, sample, Strategy::Cbl, AMPLE_BUDGET).map_err(|e| e.to_string())?;
    for kind in ModuleKind::ALL {
        let ablated = assemble(
            &bank.ablate(&BTreeSet::from([kind])),
            task,
            sample,
            Strategy::Cbl,
            AMPLE_BUDGET,
        )
        .map_err(|e| e.to_string())?;
        let expected = without(&full, section_label(kind));
        if ablated != expected || render(&ablated) != render(&expected) {
            return Err(format!(
                "drop {kind} on {}: context is not the full context minus its section",
                sample.sample_id
            ));
        }
    }
    Ok(())
}

fn sentinel(kind: ModuleKind) -> String {
    format!("sentinel {kind} entry zq{}", kind.as_str().len())
}

/// A bank with one entry per store, each tagged to be maximally relevant
/// to `task` and carrying a unique marker text.
pub fn sentinel_bank(task: &TaskDefinition) -> MemoryBank {
    let tags = task.tags.clone();
    let mut bank = MemoryBank::new("sentinel");
    bank.insert(Entry::Fact(KnowledgeFact::new(
        sentinel(ModuleKind::Fact),
        &tags,
        "s/0",
        0,
    )))
    .expect("valid");
    bank.insert(Entry::Constraint(ConstraintRule::new(
        sentinel(ModuleKind::Constraint),
        None,
        &tags,
        "s/0",
        0,
    )))
    .expect("valid");
    bank.insert(Entry::Skill(SkillTemplate::new(
        sentinel(ModuleKind::Skill),
        vec!["step".into()],
        &tags,
    )))
    .expect("valid");
    bank.insert(Entry::Case(CaseRecord {
        case_id: "s/0".into(),
        task_category: task.category_id.clone(),
        summary: sentinel(ModuleKind::Curriculum),
        difficulty: 0.5,
        success: true,
        score: 4,
        duration_ms: 1,
        failure_kinds: Vec::new(),
        created_at: 0,
    }))
    .expect("valid");
    bank
}

/// Every strategy shows exactly the sentinels of its declared stores, and
/// emptying the undeclared stores changes nothing.
pub fn check_strategy_purity(
    bank: &MemoryBank,
    task: &TaskDefinition,
    sample: &TaskSample,
) -> Result<(), String> {
    let poisoned = sentinel_bank(task);
    let strategies = [
        Strategy::Cbl,
        Strategy::ZeroShot,
        Strategy::FewShot { k: 3 },
        Strategy::Checklist,
        Strategy::RuleMemory,
    ];
    for strategy in strategies {
        let declared = declared_stores(strategy);
        let text = render(
            &assemble(&poisoned, task, sample, strategy, AMPLE_BUDGET)
                .map_err(|e| e.to_string())?,
        );
        for kind in ModuleKind::ALL {
            let shown = text.contains(&sentinel(kind));
            if shown != declared.contains(&kind) {
                return Err(format!(
                    "{strategy}: {kind} sentinel {} on {}",
                    if shown { "leaked" } else { "missing" },
                    sample.sample_id
                ));
            }
        }
        let undeclared: BTreeSet<ModuleKind> = ModuleKind::ALL
            .into_iter()
            .filter(|k| !declared.contains(k))
            .collect();
        let a = assemble(bank, task, sample, strategy, AMPLE_BUDGET).map_err(|e| e.to_string())?;
        let b = assemble(
            &bank.ablate(&undeclared),
            task,
            sample,
            strategy,
            AMPLE_BUDGET,
        )
        .map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{strategy} depends on a store it does not declare"));
        }
    }
    Ok(())
}

/// Ordering is a permutation, easier first, and budgeted selection is
/// prefix-monotone in the budget.
pub fn check_curriculum(cases: &[CaseRecord], budgets: &[usize]) -> Result<(), String> {
    let order = order_cases(cases);
    let mut got = order.ordered_case_ids.clone();
    let mut want: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    got.sort();
    want.sort();
    if got != want {
        return Err("ordering lost or duplicated a case".into());
    }
    let by_id = |id: &str| cases.iter().find(|c| c.case_id == id).expect("present");
    for pair in order.ordered_case_ids.windows(2) {
        let (a, b) = (by_id(&pair[0]), by_id(&pair[1]));
        if a.difficulty > b.difficulty {
            return Err(format!(
                "{} ({}) before easier {} ({})",
                a.case_id, a.difficulty, b.case_id, b.difficulty
            ));
        }
        if a.difficulty == b.difficulty && !a.success && b.success {
            return Err(format!(
                "failed {} before successful {} at equal difficulty",
                a.case_id, b.case_id
            ));
        }
    }
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    let mut previous: Vec<CaseRecord> = Vec::new();
    for budget in budgets {
        let chosen = select_for_context(&order, cases, budget);
        let cost: usize = chosen
            .iter()
            .map(|c| render_case_line(c).chars().count() + 1)
            .sum();
        if cost > budget {
            return Err(format!("selection costs {cost} > budget {budget}"));
        }
        if chosen.len() < previous.len() || chosen[..previous.len()] != previous[..] {
            return Err(format!(
                "selection at budget {budget} drops an earlier pick"
            ));
        }
        let ids: Vec<&str> = chosen.iter().map(|c| c.case_id.as_str()).collect();
        if ids[..]
            != order
                .ordered_case_ids
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()[..ids.len()]
        {
            return Err(format!(
                "selection at budget {budget} is not a prefix of the order"
            ));
        }
        previous = chosen;
    }
    Ok(())
}

/// Round trip, ablation on import, and merge idempotence.
pub fn check_transfer(bank: &MemoryBank, drop: &BTreeSet<ModuleKind>) -> Result<(), String> {
    let (manifest, doc) = export_bundle(bank, 1);
    for kind in ModuleKind::ALL {
        if manifest.entry_counts.get(&kind).copied() != Some(bank.len(kind)) {
            return Err(format!("manifest count for {kind} is wrong"));
        }
    }
    let mut back =
        import_bundle(&doc, "other", &BTreeSet::new(), None).map_err(|e| e.to_string())?;
    back.agent_id = bank.agent_id.clone();
    if &back != bank {
        return Err("import(export(b)) differs from b".into());
    }
    let on_import = import_bundle(&doc, "x", drop, None).map_err(|e| e.to_string())?;
    let (_, ablated_doc) = export_bundle(&bank.ablate(drop), 1);
    let before_export =
        import_bundle(&ablated_doc, "x", &BTreeSet::new(), None).map_err(|e| e.to_string())?;
    if on_import != before_export {
        return Err("ablate-on-import differs from ablate-then-export".into());
    }
    let base = MemoryBank::new("target");
    let once = import_bundle(&doc, "target", drop, Some(&base)).map_err(|e| e.to_string())?;
    let twice = import_bundle(&doc, "target", drop, Some(&once)).map_err(|e| e.to_string())?;
    if once.facts != twice.facts
        || once.constraints != twice.constraints
        || once.cases != twice.cases
    {
        return Err("second merge changed a store".into());
    }
    let ids = |b: &MemoryBank| b.skills.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    if ids(&once) != ids(&twice)
        || once
            .skills
            .iter()
            .zip(&twice.skills)
            .any(|(a, b)| b.validation_count != a.validation_count + 1)
    {
        return Err("second merge should only re-validate skills".into());
    }
    Ok(())
}

/// Agent `a` and agent `b`, which imported `a`'s bundle, render identical
/// case-based contexts for every given sample.
pub fn check_cross_agent_identity(
    a: &MemoryBank,
    tasks: &[&TaskDefinition],
    budget_chars: usize,
) -> Result<usize, String> {
    let (_, doc) = export_bundle(a, 1);
    let b = import_bundle(&doc, "agent-b", &BTreeSet::new(), None).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for task in tasks {
        for variant in 1..=task.prompt_variants.len() as u32 {
            let sample = task.sample(1, variant);
            let ra = assemble(a, task, &sample, Strategy::Cbl, budget_chars)
                .map_err(|e| e.to_string())?;
            let rb = assemble(&b, task, &sample, Strategy::Cbl, budget_chars)
                .map_err(|e| e.to_string())?;
            if render(&ra) != render(&rb) {
                return Err(format!("contexts differ on {}", sample.sample_id));
            }
            compared += 1;
        }
    }
    Ok(compared)
}
