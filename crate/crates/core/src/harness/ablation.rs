use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::report::Provenance;
use super::{run_jobs, HarnessError, HarnessOptions, Job, TaskMetrics};
use crate::context::Strategy;
use crate::memory::{canonical_json, ModuleKind};
use crate::runtime::BackendPool;
use crate::suite::Suite;
use crate::transfer::{import_bundle, read_bundle};

use super::report::REPORT_VERSION;

/// One ablation condition: the imported bundle, possibly minus one store,
/// or the rule-memory baseline reading the same bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationCondition {
    Full,
    Drop(ModuleKind),
    RuleMemory,
}

impl AblationCondition {
    pub const ALL: [AblationCondition; 6] = [
        AblationCondition::Full,
        AblationCondition::Drop(ModuleKind::Fact),
        AblationCondition::Drop(ModuleKind::Constraint),
        AblationCondition::Drop(ModuleKind::Skill),
        AblationCondition::Drop(ModuleKind::Curriculum),
        AblationCondition::RuleMemory,
    ];

    /// Name of the condition and of its fixture recording.
    pub fn label(&self) -> String {
        match self {
            AblationCondition::Full => "full".into(),
            AblationCondition::Drop(kind) => format!("drop-{kind}"),
            AblationCondition::RuleMemory => "rule-memory".into(),
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            AblationCondition::RuleMemory => Strategy::RuleMemory,
            _ => Strategy::Cbl,
        }
    }

    pub fn dropped(&self) -> BTreeSet<ModuleKind> {
        match self {
            AblationCondition::Drop(kind) => BTreeSet::from([*kind]),
            _ => BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub strategy: Strategy,
    pub dropped: Vec<ModuleKind>,
    pub samples: usize,
    pub score_total: u32,
    pub success_count: u32,
    pub score_mean: f64,
    pub success_rate: f64,
    /// Fired samples over the samples of the tasks declaring the signal.
    pub signal_trigger_rates: BTreeMap<String, f64>,
    pub per_task: BTreeMap<String, TaskMetrics>,
}

impl ConditionResult {
    fn from_metrics(
        condition: AblationCondition,
        per_task: BTreeMap<String, TaskMetrics>,
    ) -> ConditionResult {
        let samples: usize = per_task.values().map(|m| m.samples).sum();
        let score_total: u32 = per_task.values().map(|m| m.score_total).sum();
        let success_count: u32 = per_task.values().map(|m| m.success_count).sum();
        let mut fired: BTreeMap<String, (u32, usize)> = BTreeMap::new();
        for m in per_task.values() {
            for (id, count) in &m.signal_counts {
                let slot = fired.entry(id.clone()).or_default();
                slot.0 += count;
                slot.1 += m.samples;
            }
        }
        let n = samples.max(1) as f64;
        ConditionResult {
            condition: condition.label(),
            strategy: condition.strategy(),
            dropped: condition.dropped().into_iter().collect(),
            samples,
            score_total,
            success_count,
            score_mean: f64::from(score_total) / n,
            success_rate: f64::from(success_count) / n,
            signal_trigger_rates: fired
                .into_iter()
                .map(|(id, (c, s))| (id, f64::from(c) / s.max(1) as f64))
                .collect(),
            per_task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub report_version: u32,
    pub provenance: Provenance,
    pub bundle_hash: String,
    pub source_agent: String,
    pub diagnostics: Vec<String>,
    pub conditions: Vec<ConditionResult>,
}

impl AblationReport {
    pub fn condition(&self, label: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.condition == label)
    }

    pub fn to_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("report serializes"))
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        for c in &self.conditions {
            for (task, m) in &c.per_task {
                m.check().map_err(|e| {
                    HarnessError::Invariant(format!("{} / {task}: {e}", c.condition))
                })?;
            }
        }
        Ok(())
    }
}

/// Runs the diagnostic tasks once per condition, each from a fresh import
/// of `bundle`.
pub fn run_ablation(
    bundle: &str,
    suite: &Suite,
    diagnostics: &[String],
    pool: &dyn BackendPool,
    options: &HarnessOptions,
) -> Result<AblationReport, HarnessError> {
    let (manifest, _) = read_bundle(bundle)?;
    for task in diagnostics {
        suite.task(task)?;
    }
    let mut jobs = Vec::new();
    for condition in AblationCondition::ALL {
        let label = condition.label();
        let bank = import_bundle(
            bundle,
            &format!("ablation-{label}"),
            &condition.dropped(),
            None,
        )?;
        for task in diagnostics {
            jobs.push(Job {
                label: label.clone(),
                strategy: condition.strategy(),
                task: task.clone(),
                bank: bank.clone(),
            });
        }
    }
    let mut runs = run_jobs(suite, &jobs, pool, options)?.into_iter();
    let conditions = AblationCondition::ALL
        .iter()
        .map(|condition| {
            let per_task = runs
                .by_ref()
                .take(diagnostics.len())
                .map(|r| (r.task, r.metrics))
                .collect();
            ConditionResult::from_metrics(*condition, per_task)
        })
        .collect();
    Ok(AblationReport {
        report_version: REPORT_VERSION,
        provenance: Provenance::new(suite, pool, options),
        bundle_hash: manifest.content_hash,
        source_agent: manifest.source_agent,
        diagnostics: diagnostics.to_vec(),
        conditions,
    })
}
