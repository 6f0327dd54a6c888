//! Bundles: a bank plus a manifest whose content hash guards the body.
//!
//! The document is one canonical JSON object with a `manifest` and a `body`;
//! the body is exactly the bank's serialized form, and the hash is taken
//! over those bytes. Import verifies the hash before trusting anything else
//! in the body.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::memory::{
    canonical_json, BankError, Entry, MemoryBank, ModuleKind, Timestamp, SCHEMA_VERSION,
};
use crate::text::sha256_hex;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("bundle hash mismatch: manifest says {expected}, body hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("unsupported bundle schema version {0} (supported: {SCHEMA_VERSION})")]
    UnsupportedVersion(u64),
    #[error("corrupt bundle: {0}")]
    Corrupt(String),
}

impl From<BankError> for TransferError {
    fn from(e: BankError) -> Self {
        match e {
            BankError::UnsupportedVersion(v) => TransferError::UnsupportedVersion(v),
            other => TransferError::Corrupt(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub source_agent: String,
    pub exported_at: Timestamp,
    pub entry_counts: BTreeMap<ModuleKind, usize>,
    /// SHA-256 of the canonical body.
    pub content_hash: String,
}

fn counts(bank: &MemoryBank) -> BTreeMap<ModuleKind, usize> {
    ModuleKind::ALL.iter().map(|k| (*k, bank.len(*k))).collect()
}

/// Serializes `bank` into a bundle document stamped with `exported_at`.
pub fn export_bundle(bank: &MemoryBank, exported_at: Timestamp) -> (BundleManifest, String) {
    let body = bank.serialize();
    let manifest = BundleManifest {
        schema_version: bank.schema_version,
        source_agent: bank.agent_id.clone(),
        exported_at,
        entry_counts: counts(bank),
        content_hash: sha256_hex(body.as_bytes()),
    };
    let document = json!({
        "manifest": serde_json::to_value(&manifest).expect("manifest serializes"),
        "body": serde_json::to_value(bank).expect("bank serializes"),
    });
    (manifest, canonical_json(&document))
}

/// Parses and verifies a bundle without applying it.
pub fn read_bundle(document: &str) -> Result<(BundleManifest, MemoryBank), TransferError> {
    let mut value: Value = serde_json::from_str(document)
        .map_err(|e| TransferError::Corrupt(format!("invalid JSON: {e}")))?;
    let (Some(manifest), Some(body)) = (
        value.get_mut("manifest").map(Value::take),
        value.get_mut("body").map(Value::take),
    ) else {
        return Err(TransferError::Corrupt(
            "expected `manifest` and `body`".into(),
        ));
    };
    let version = manifest
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| TransferError::Corrupt("manifest lacks schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(TransferError::UnsupportedVersion(version));
    }
    let manifest: BundleManifest = serde_json::from_value(manifest)
        .map_err(|e| TransferError::Corrupt(format!("manifest: {e}")))?;

    let actual = sha256_hex(canonical_json(&body).as_bytes());
    if actual != manifest.content_hash {
        return Err(TransferError::HashMismatch {
            expected: manifest.content_hash,
            actual,
        });
    }
    let bank = MemoryBank::from_value(body)?;
    if counts(&bank) != manifest.entry_counts {
        return Err(TransferError::Corrupt(
            "entry counts disagree with body".into(),
        ));
    }
    if bank.agent_id != manifest.source_agent {
        return Err(TransferError::Corrupt(
            "source agent disagrees with body".into(),
        ));
    }
    Ok((manifest, bank))
}

/// Loads a bundle for `target_agent`, dropping the `drop` stores. With
/// `merge_into`, the bundle's entries are added to that bank; duplicates
/// keep the existing entry, except skills, which gain a validation.
pub fn import_bundle(
    document: &str,
    target_agent: &str,
    drop: &BTreeSet<ModuleKind>,
    merge_into: Option<&MemoryBank>,
) -> Result<MemoryBank, TransferError> {
    let (_, bank) = read_bundle(document)?;
    let mut incoming = bank.ablate(drop);
    incoming.agent_id = target_agent.to_string();
    let Some(base) = merge_into else {
        return Ok(incoming);
    };
    let mut merged = base.clone();
    merged.agent_id = target_agent.to_string();
    let entries = incoming
        .facts
        .into_iter()
        .map(Entry::Fact)
        .chain(incoming.constraints.into_iter().map(Entry::Constraint))
        .chain(incoming.skills.into_iter().map(Entry::Skill))
        .chain(incoming.cases.into_iter().map(Entry::Case));
    for entry in entries {
        merged.insert(entry)?;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{CaseRecord, ConstraintRule, KnowledgeFact, SkillTemplate};

    fn bank() -> MemoryBank {
        let mut b = MemoryBank::new("A");
        b.insert(Entry::Fact(KnowledgeFact::new(
            "retrieval needs citations",
            ["rag"],
            "seed",
            0,
        )))
        .unwrap();
        b.insert(Entry::Constraint(ConstraintRule::new(
            "stop after 3 retries",
            None,
            ["ops"],
            "A/x",
            5,
        )))
        .unwrap();
        b.insert(Entry::Skill(SkillTemplate::new(
            "validate",
            vec!["check".into(), "emit".into()],
            ["ops"],
        )))
        .unwrap();
        b.insert(Entry::Case(CaseRecord {
            case_id: "A/x".into(),
            task_category: "ops".into(),
            summary: "s".into(),
            difficulty: 0.25,
            success: true,
            score: 4,
            duration_ms: 10,
            failure_kinds: vec![],
            created_at: 5,
        }))
        .unwrap();
        b
    }

    #[test]
    fn export_is_stable_and_counts_stores() {
        let b = bank();
        let (m1, d1) = export_bundle(&b, 7);
        let (m2, d2) = export_bundle(&b, 7);
        assert_eq!(m1.content_hash, m2.content_hash);
        assert_eq!(d1, d2);
        for kind in ModuleKind::ALL {
            assert_eq!(m1.entry_counts[&kind], 1);
        }
        let (m3, _) = export_bundle(&b.ablate(&BTreeSet::from([ModuleKind::Skill])), 7);
        assert_eq!(m3.entry_counts[&ModuleKind::Skill], 0);
        assert_eq!(m3.content_hash.len(), 64);
    }

    #[test]
    fn round_trip_renames_only() {
        let b = bank();
        let (_, doc) = export_bundle(&b, 0);
        let got = import_bundle(&doc, "B", &BTreeSet::new(), None).unwrap();
        assert_eq!(got.agent_id, "B");
        let mut renamed = b.clone();
        renamed.agent_id = "B".into();
        assert_eq!(got, renamed);
    }

    #[test]
    fn drop_on_import_equals_drop_before_export() {
        let b = bank();
        let drop = BTreeSet::from([ModuleKind::Fact, ModuleKind::Curriculum]);
        let (_, full) = export_bundle(&b, 0);
        let (_, pre) = export_bundle(&b.ablate(&drop), 0);
        assert_eq!(
            import_bundle(&full, "B", &drop, None).unwrap(),
            import_bundle(&pre, "B", &BTreeSet::new(), None).unwrap()
        );
    }

    #[test]
    fn tampering_detected() {
        let (_, doc) = export_bundle(&bank(), 0);
        let tampered = doc.replace("stop after 3 retries", "stop after 9 retries");
        assert_ne!(tampered, doc);
        assert!(matches!(
            import_bundle(&tampered, "B", &BTreeSet::new(), None),
            Err(TransferError::HashMismatch { .. })
        ));
    }

    #[test]
    fn version_checked_before_hash() {
        let (_, doc) = export_bundle(&bank(), 0);
        let bumped = doc.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(
            import_bundle(&bumped, "B", &BTreeSet::new(), None),
            Err(TransferError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn merge_twice_only_bumps_skills() {
        let (_, doc) = export_bundle(&bank(), 0);
        let target = MemoryBank::new("B");
        let once = import_bundle(&doc, "B", &BTreeSet::new(), Some(&target)).unwrap();
        let twice = import_bundle(&doc, "B", &BTreeSet::new(), Some(&once)).unwrap();
        assert_eq!(once.facts, twice.facts);
        assert_eq!(once.constraints, twice.constraints);
        assert_eq!(once.cases, twice.cases);
        assert_eq!(
            twice.skills[0].validation_count,
            once.skills[0].validation_count + 1
        );
    }

    #[test]
    fn garbage_is_corrupt() {
        assert!(matches!(
            import_bundle("not json", "B", &BTreeSet::new(), None),
            Err(TransferError::Corrupt(_))
        ));
        assert!(matches!(
            import_bundle("{}", "B", &BTreeSet::new(), None),
            Err(TransferError::Corrupt(_))
        ));
    }
}
