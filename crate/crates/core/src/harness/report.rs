use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_protocols, HarnessError, HarnessOptions, ProtocolRun, TaskMetrics};
use crate::context::{Strategy, DEFAULT_FEW_SHOT_K};
use crate::memory::{canonical_json, MemoryBank};
use crate::runtime::BackendPool;
use crate::suite::{ComplexityGroup, Suite, CATEGORIES};

pub const REPORT_VERSION: u32 = 1;

/// What produced a report. No wall-clock fields, so identical inputs give
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    /// Fingerprint of the suite configuration.
    pub config_hash: String,
    /// Fingerprint of the backend's answers (fixtures or provider config).
    pub fixture_hash: String,
    pub budget_chars: usize,
}

impl Provenance {
    pub fn new(suite: &Suite, pool: &dyn BackendPool, options: &HarnessOptions) -> Self {
        Provenance {
            backend: pool.describe(),
            config_hash: suite.fingerprint(),
            fixture_hash: pool.fingerprint(),
            budget_chars: options.run.budget_chars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Strategy,
    pub task: String,
    pub group: String,
    pub metrics: TaskMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestBaseline {
    pub method: Strategy,
    pub score_mean: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub group: String,
    pub score_mean: f64,
    pub success_rate: f64,
    pub baseline: Strategy,
    pub baseline_score_mean: f64,
    pub baseline_success_rate: f64,
    pub delta_score: f64,
    pub delta_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGain {
    pub group: String,
    pub tasks: Vec<String>,
    pub mean_delta_score: f64,
    pub mean_delta_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: Strategy,
    pub deltas: Vec<TaskDelta>,
    pub groups: Vec<GroupGain>,
}

impl Comparison {
    pub fn delta(&self, task: &str) -> Option<&TaskDelta> {
        self.deltas.iter().find(|d| d.task == task)
    }
}

/// Means over every sample a method ran, across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub samples: usize,
    pub score_mean: f64,
    pub success_rate: f64,
    pub mean_time_ms: f64,
    pub mean_tokens: f64,
    pub error_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub provenance: Provenance,
    pub methods: Vec<Strategy>,
    pub rows: Vec<MethodRow>,
    pub best_baseline: BTreeMap<String, BestBaseline>,
    pub global: BTreeMap<String, GlobalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

fn task_rank(task: &str) -> usize {
    CATEGORIES
        .iter()
        .position(|c| *c == task)
        .unwrap_or(CATEGORIES.len())
}

fn group_name(task: &str) -> String {
    ComplexityGroup::of(task)
        .map(|g| g.as_str().to_string())
        .unwrap_or_else(|| "other".to_string())
}

/// Best baseline among `rows` of one task: highest score, then success,
/// then lexicographically smallest method name. Counts are compared, not
/// means, so the choice is exact.
fn pick_best<'a>(rows: impl Iterator<Item = &'a MethodRow>) -> Option<&'a MethodRow> {
    rows.filter(|r| r.method.is_baseline()).min_by(|a, b| {
        b.metrics
            .score_total
            .cmp(&a.metrics.score_total)
            .then(b.metrics.success_count.cmp(&a.metrics.success_count))
            .then_with(|| a.method.to_string().cmp(&b.method.to_string()))
    })
}

impl EvalReport {
    /// Collects protocol runs into one report. A comparison for the
    /// case-based method is attached when every one of its tasks has a
    /// baseline.
    pub fn from_runs(runs: &[ProtocolRun], provenance: Provenance) -> Self {
        let mut rows: Vec<MethodRow> = runs
            .iter()
            .flat_map(|run| {
                run.tasks.iter().map(move |t| MethodRow {
                    method: run.strategy,
                    task: t.task.clone(),
                    group: group_name(&t.task),
                    metrics: t.metrics.clone(),
                })
            })
            .collect();
        let method_rank = |m: &Strategy| runs.iter().position(|r| r.strategy == *m);
        rows.sort_by(|a, b| {
            task_rank(&a.task)
                .cmp(&task_rank(&b.task))
                .then_with(|| a.task.cmp(&b.task))
                .then_with(|| method_rank(&a.method).cmp(&method_rank(&b.method)))
        });

        let mut best_baseline = BTreeMap::new();
        for task in rows.iter().map(|r| r.task.clone()).collect::<Vec<_>>() {
            if let Some(best) = pick_best(rows.iter().filter(|r| r.task == task)) {
                best_baseline.insert(
                    task,
                    BestBaseline {
                        method: best.method,
                        score_mean: best.metrics.score_mean,
                        success_rate: best.metrics.success_rate,
                    },
                );
            }
        }

        let global = runs
            .iter()
            .map(|run| {
                let records: Vec<_> = run.tasks.iter().flat_map(|t| t.samples.iter()).collect();
                let n = records.len().max(1) as f64;
                let sum = |f: &dyn Fn(&super::SampleRecord) -> f64| {
                    records.iter().map(|r| f(r)).sum::<f64>() / n
                };
                (
                    run.strategy.to_string(),
                    GlobalMetrics {
                        samples: records.len(),
                        score_mean: sum(&|r| f64::from(r.score.score)),
                        success_rate: sum(&|r| f64::from(u8::from(r.score.success))),
                        mean_time_ms: sum(&|r| r.duration_ms as f64),
                        mean_tokens: sum(&|r| (r.tokens_in + r.tokens_out) as f64),
                        error_count: records.iter().filter(|r| r.score.errored).count() as u32,
                    },
                )
            })
            .collect();

        let mut report = EvalReport {
            report_version: REPORT_VERSION,
            provenance,
            methods: runs.iter().map(|r| r.strategy).collect(),
            rows,
            best_baseline,
            global,
            comparison: None,
        };
        if report.methods.contains(&Strategy::Cbl) {
            report.comparison = compare(&report, Strategy::Cbl).ok();
        }
        report
    }

    pub fn row(&self, method: Strategy, task: &str) -> Option<&MethodRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.task == task)
    }

    pub fn to_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("report serializes"))
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Invariant(format!("report: {e}")))
    }

    /// Re-derives everything derivable and reports the first disagreement.
    pub fn check(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Invariant(msg));
        for row in &self.rows {
            if let Err(e) = row.metrics.check() {
                return bad(format!("{} / {}: {e}", row.method, row.task));
            }
        }
        for (task, best) in &self.best_baseline {
            match pick_best(self.rows.iter().filter(|r| &r.task == task)) {
                Some(row) if row.method == best.method => {}
                _ => return bad(format!("best baseline for `{task}` is not the argmax")),
            }
        }
        if let Some(cmp) = &self.comparison {
            if compare(self, cmp.method).as_ref() != Ok(cmp) {
                return bad("comparison disagrees with rows".into());
            }
        }
        Ok(())
    }
}

/// Per-task and per-group gains of `method` over the best baseline.
pub fn compare(report: &EvalReport, method: Strategy) -> Result<Comparison, HarnessError> {
    let rows: Vec<&MethodRow> = report.rows.iter().filter(|r| r.method == method).collect();
    if rows.is_empty() {
        return Err(HarnessError::MissingMethod {
            method: method.to_string(),
            task: "*".into(),
        });
    }
    let mut deltas = Vec::with_capacity(rows.len());
    for row in rows {
        let best = report
            .best_baseline
            .get(&row.task)
            .ok_or_else(|| HarnessError::MissingBaseline(row.task.clone()))?;
        deltas.push(TaskDelta {
            task: row.task.clone(),
            group: row.group.clone(),
            score_mean: row.metrics.score_mean,
            success_rate: row.metrics.success_rate,
            baseline: best.method,
            baseline_score_mean: best.score_mean,
            baseline_success_rate: best.success_rate,
            delta_score: row.metrics.score_mean - best.score_mean,
            delta_success: row.metrics.success_rate - best.success_rate,
        });
    }
    let groups = [
        ComplexityGroup::Structured,
        ComplexityGroup::Complex,
        ComplexityGroup::OpenEnded,
    ]
    .into_iter()
    .filter_map(|g| {
        let members: Vec<&TaskDelta> = deltas.iter().filter(|d| d.group == g.as_str()).collect();
        if members.is_empty() {
            return None;
        }
        let n = members.len() as f64;
        Some(GroupGain {
            group: g.as_str().to_string(),
            tasks: members.iter().map(|d| d.task.clone()).collect(),
            mean_delta_score: members.iter().map(|d| d.delta_score).sum::<f64>() / n,
            mean_delta_success: members.iter().map(|d| d.delta_success).sum::<f64>() / n,
        })
    })
    .collect();
    Ok(Comparison {
        method,
        deltas,
        groups,
    })
}

/// The case-based method and all four baselines over the whole suite,
/// with the comparison attached.
pub fn eval_all(
    suite: &Suite,
    pool: &dyn BackendPool,
    bank0: &MemoryBank,
    options: &HarnessOptions,
) -> Result<(EvalReport, Vec<ProtocolRun>), HarnessError> {
    let k = if suite.few_shot_k == 0 {
        DEFAULT_FEW_SHOT_K
    } else {
        suite.few_shot_k
    };
    let methods = [
        Strategy::Cbl,
        Strategy::ZeroShot,
        Strategy::FewShot { k },
        Strategy::Checklist,
        Strategy::RuleMemory,
    ];
    let runs = run_protocols(suite, &methods, pool, bank0, options)?;
    let mut report = EvalReport::from_runs(&runs, Provenance::new(suite, pool, options));
    report.comparison = Some(compare(&report, Strategy::Cbl)?);
    Ok((report, runs))
}

fn signed(x: f64) -> String {
    let s = format!("{x:+.3}");
    if s == "-0.000" {
        "+0.000".to_string()
    } else {
        s
    }
}

/// Plain-text tables of a report.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let p = &report.provenance;
    let _ = writeln!(out, "backend      {}", p.backend);
    let _ = writeln!(out, "config hash  {}", p.config_hash);
    let _ = writeln!(out, "fixture hash {}", p.fixture_hash);
    let _ = writeln!(out, "budget       {} chars", p.budget_chars);
    out.push('\n');

    let _ = writeln!(out, "Per-task metrics");
    let _ = writeln!(
        out,
        "{:<22} {:<12} {:>6} {:>8} {:>12} {:>12} {:>6}",
        "task", "method", "score", "success", "time_ms", "tokens", "errors"
    );
    for r in &report.rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<22} {:<12} {:>6.3} {:>8.3} {:>12.1} {:>12.1} {:>6}",
            r.task,
            r.method.to_string(),
            m.score_mean,
            m.success_rate,
            m.mean_time_ms,
            m.mean_tokens,
            m.error_count
        );
    }

    if !report.best_baseline.is_empty() {
        out.push('\n');
        let _ = writeln!(out, "Best baseline");
        let mut tasks: Vec<&String> = report.best_baseline.keys().collect();
        tasks.sort_by_key(|t| (task_rank(t), t.to_string()));
        for task in tasks {
            let b = &report.best_baseline[task];
            let _ = writeln!(
                out,
                "{:<22} {:<12} {:>6.3} {:>8.3}",
                task,
                b.method.to_string(),
                b.score_mean,
                b.success_rate
            );
        }
    }

    if let Some(cmp) = &report.comparison {
        out.push('\n');
        let _ = writeln!(out, "Gain of {} over the best baseline", cmp.method);
        let _ = writeln!(
            out,
            "{:<22} {:<11} {:>13} {:>13} {:>8} {:>8}",
            "task", "group", "method", "baseline", "d_score", "d_succ"
        );
        for d in &cmp.deltas {
            let _ = writeln!(
                out,
                "{:<22} {:<11} {:>6.3}/{:<6.3} {:>6.3}/{:<6.3} {:>8} {:>8}",
                d.task,
                d.group,
                d.score_mean,
                d.success_rate,
                d.baseline_score_mean,
                d.baseline_success_rate,
                signed(d.delta_score),
                signed(d.delta_success)
            );
        }
        out.push('\n');
        let _ = writeln!(out, "Mean gain by complexity group");
        for g in &cmp.groups {
            let _ = writeln!(
                out,
                "{:<11} {:>8} {:>8}  ({})",
                g.group,
                signed(g.mean_delta_score),
                signed(g.mean_delta_success),
                g.tasks.join(", ")
            );
        }
    }

    out.push('\n');
    let _ = writeln!(out, "Global means");
    for m in &report.methods {
        if let Some(g) = report.global.get(&m.to_string()) {
            let _ = writeln!(
                out,
                "{:<12} samples {:>3}  score {:.3}  success {:.3}  time_ms {:.1}  tokens {:.1}  errors {}",
                m.to_string(),
                g.samples,
                g.score_mean,
                g.success_rate,
                g.mean_time_ms,
                g.mean_tokens,
                g.error_count
            );
        }
    }
    out
}

/// Plain-text table of an ablation report.
pub fn render_ablation_text(report: &super::AblationReport) -> String {
    let mut out = String::new();
    let p = &report.provenance;
    let _ = writeln!(out, "backend      {}", p.backend);
    let _ = writeln!(out, "config hash  {}", p.config_hash);
    let _ = writeln!(out, "fixture hash {}", p.fixture_hash);
    let _ = writeln!(out, "bundle hash  {}", report.bundle_hash);
    let _ = writeln!(out, "source agent {}", report.source_agent);
    let _ = writeln!(out, "diagnostics  {}", report.diagnostics.join(", "));
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<16} {:<12} {:>7} {:>6} {:>8}",
        "condition", "strategy", "samples", "score", "success"
    );
    for c in &report.conditions {
        let _ = writeln!(
            out,
            "{:<16} {:<12} {:>7} {:>6.3} {:>8.3}",
            c.condition,
            c.strategy.to_string(),
            c.samples,
            c.score_mean,
            c.success_rate
        );
    }
    out.push('\n');
    let _ = writeln!(out, "Signal trigger rates");
    for c in &report.conditions {
        let rates: Vec<String> = c
            .signal_trigger_rates
            .iter()
            .map(|(id, r)| format!("{id}={r:.3}"))
            .collect();
        let _ = writeln!(out, "{:<16} {}", c.condition, rates.join("  "));
    }
    out
}
