//! Text normalization and content hashing shared by every store.

use sha2::{Digest, Sha256};

/// Lowercases, collapses runs of whitespace to one space and trims.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Normalization used for entry identity: [`normalize`] followed by stripping
/// trailing punctuation, so "Recheck formats." and "recheck  formats" collide.
pub fn normalize_for_id(text: &str) -> String {
    let normalized = normalize(text);
    normalized
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable entry id: `<prefix>-` followed by the first 16 hex digits of the
/// SHA-256 of the id-normalized text.
pub fn entry_id(prefix: &str, text: &str) -> String {
    let digest = sha256_hex(normalize_for_id(text).as_bytes());
    format!("{prefix}-{}", &digest[..16])
}

/// Lowercased, trimmed, sorted and deduplicated tags. Empty tags are dropped.
pub fn normalize_tags<I, S>(tags: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = tags
        .into_iter()
        .map(|t| normalize(t.as_ref()))
        .filter(|t| !t.is_empty())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// True when `tags` is already in the form produced by [`normalize_tags`].
pub fn tags_are_normalized(tags: &[String]) -> bool {
    tags.iter().all(|t| !t.is_empty() && *t == normalize(t)) && tags.windows(2).all(|w| w[0] < w[1])
}
