use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendPool, CompletionRequest, CompletionResult};
use crate::memory::canonical_json;
use crate::text::sha256_hex;

/// One recorded completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRecord {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Recorded completions of one run label, keyed by sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayBackend {
    name: String,
    records: BTreeMap<String, FixtureRecord>,
}

impl ReplayBackend {
    pub fn new(label: impl Into<String>, records: BTreeMap<String, FixtureRecord>) -> Self {
        ReplayBackend {
            name: format!("replay:{}", label.into()),
            records,
        }
    }

    pub fn records(&self) -> &BTreeMap<String, FixtureRecord> {
        &self.records
    }
}

impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let record =
            self.records
                .get(&request.sample_id)
                .ok_or_else(|| BackendError::FixtureMissing {
                    label: self.name.trim_start_matches("replay:").to_string(),
                    sample_id: request.sample_id.clone(),
                })?;
        Ok(CompletionResult {
            text: record.text.clone(),
            tokens_in: record.tokens_in,
            tokens_out: record.tokens_out,
            latency_ms: record.latency_ms,
            backend_error: record.error.clone(),
        })
    }
}

/// A fixture directory: `<label>.json` per method or ablation condition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FixtureSet {
    labels: BTreeMap<String, Arc<ReplayBackend>>,
}

impl FixtureSet {
    pub fn from_records(labels: BTreeMap<String, BTreeMap<String, FixtureRecord>>) -> Self {
        FixtureSet {
            labels: labels
                .into_iter()
                .map(|(label, records)| {
                    let backend = Arc::new(ReplayBackend::new(label.clone(), records));
                    (label, backend)
                })
                .collect(),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref();
        let unavailable = |e: &dyn std::fmt::Display| {
            BackendError::Unavailable(format!("fixtures at {}: {e}", dir.display()))
        };
        let mut labels = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| unavailable(&e))? {
            let path = entry.map_err(|e| unavailable(&e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(label) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|e| unavailable(&e))?;
            let records: BTreeMap<String, FixtureRecord> = serde_json::from_str(&text)
                .map_err(|e| unavailable(&format!("{}: {e}", path.display())))?;
            labels.insert(label.to_string(), records);
        }
        if labels.is_empty() {
            return Err(unavailable(&"no fixture files"));
        }
        Ok(Self::from_records(labels))
    }

    /// Writes one canonical JSON file per label.
    pub fn save(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (label, backend) in &self.labels {
            fs::write(
                dir.join(format!("{label}.json")),
                Self::document(backend.records()),
            )?;
        }
        Ok(())
    }

    fn document(records: &BTreeMap<String, FixtureRecord>) -> String {
        canonical_json(&serde_json::to_value(records).expect("fixture records serialize"))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn get(&self, label: &str) -> Option<&ReplayBackend> {
        self.labels.get(label).map(|b| b.as_ref())
    }
}

impl BackendPool for FixtureSet {
    fn backend_for(&self, run_label: &str) -> Result<Arc<dyn Backend>, BackendError> {
        self.labels
            .get(run_label)
            .map(|b| b.clone() as Arc<dyn Backend>)
            .ok_or_else(|| BackendError::Unavailable(format!("no fixture file for `{run_label}`")))
    }

    fn describe(&self) -> String {
        "replay".to_string()
    }

    fn fingerprint(&self) -> String {
        let mut joined = String::new();
        for (label, backend) in &self.labels {
            joined.push_str(label);
            joined.push('\n');
            joined.push_str(&Self::document(backend.records()));
        }
        sha256_hex(joined.as_bytes())
    }
}
