//! Curriculum ordering for the case store: estimate how hard a case was and
//! present easier, reliable cases before harder ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::line_cost;
use crate::harness::SampleScore;
use crate::memory::{CaseRecord, MAX_SCORE};
use crate::update::{classify_failures, ExecutionTrace};

/// Weights of the difficulty estimate. Each term is normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyWeights {
    /// Applied to `failure_count / 5`.
    pub failures: f64,
    /// Applied to `1 - score / 4`.
    pub score: f64,
    /// Applied to `min(duration / deadline, 1)`.
    pub duration: f64,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        DifficultyWeights {
            failures: 0.4,
            score: 0.3,
            duration: 0.3,
        }
    }
}

impl DifficultyWeights {
    pub fn check(&self) -> Result<(), String> {
        for (name, w) in [
            ("failures", self.failures),
            ("score", self.score),
            ("duration", self.duration),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(format!(
                    "difficulty weight `{name}` must be finite and >= 0"
                ));
            }
        }
        Ok(())
    }

    pub fn estimate(&self, inputs: &DifficultyInputs) -> f64 {
        let failure_term = inputs.failure_count as f64 / 5.0;
        let score_term = 1.0 - f64::from(inputs.score.min(MAX_SCORE)) / f64::from(MAX_SCORE);
        let duration_term = if inputs.deadline_ms == 0 {
            1.0
        } else {
            (inputs.duration_ms as f64 / inputs.deadline_ms as f64).min(1.0)
        };
        let raw =
            self.failures * failure_term + self.score * score_term + self.duration * duration_term;
        if raw.is_nan() {
            0.0
        } else {
            raw.clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DifficultyInputs {
    pub failure_count: usize,
    pub score: u8,
    pub duration_ms: u64,
    pub deadline_ms: u64,
}

/// Difficulty of one attempt, using the built-in failure detectors.
pub fn estimate_difficulty(
    trace: &ExecutionTrace,
    rubric_result: &SampleScore,
    deadline_ms: u64,
    weights: &DifficultyWeights,
) -> f64 {
    weights.estimate(&DifficultyInputs {
        failure_count: classify_failures(trace, deadline_ms).len(),
        score: rubric_result.score,
        duration_ms: trace.duration_ms,
        deadline_ms,
    })
}

/// Sort key of one case: difficulty, then 0 for success / 1 for failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumKey {
    pub difficulty: f64,
    pub success_rank: u8,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurriculumOrder {
    pub ordered_case_ids: Vec<String>,
    pub key_of: BTreeMap<String, CurriculumKey>,
}

/// Easier first; among equals successes first, then older, then by id.
pub fn order_cases(cases: &[CaseRecord]) -> CurriculumOrder {
    let mut sorted: Vec<&CaseRecord> = cases.iter().collect();
    sorted.sort_by(|a, b| {
        a.difficulty
            .total_cmp(&b.difficulty)
            .then_with(|| b.success.cmp(&a.success))
            .then_with(|| a.created_at.cmp(&b.created_at))
            .then_with(|| a.case_id.cmp(&b.case_id))
    });
    CurriculumOrder {
        ordered_case_ids: sorted.iter().map(|c| c.case_id.clone()).collect(),
        key_of: sorted
            .iter()
            .map(|c| {
                (
                    c.case_id.clone(),
                    CurriculumKey {
                        difficulty: c.difficulty,
                        success_rank: u8::from(!c.success),
                    },
                )
            })
            .collect(),
    }
}

/// How a case appears in a prompt.
pub fn render_case_line(case: &CaseRecord) -> String {
    format!(
        "- {} [difficulty {:.2}]",
        case.summary.trim(),
        case.difficulty
    )
}

/// Longest prefix of `order` whose rendered lines fit in `budget_chars`.
/// Stops at the first case that does not fit.
pub fn select_for_context(
    order: &CurriculumOrder,
    cases: &[CaseRecord],
    budget_chars: usize,
) -> Vec<CaseRecord> {
    let by_id: BTreeMap<&str, &CaseRecord> =
        cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut used = 0usize;
    let mut out = Vec::new();
    for id in &order.ordered_case_ids {
        let Some(case) = by_id.get(id.as_str()) else {
            continue;
        };
        let cost = line_cost(&render_case_line(case));
        if used + cost > budget_chars {
            break;
        }
        used += cost;
        out.push((*case).clone());
    }
    out
}
