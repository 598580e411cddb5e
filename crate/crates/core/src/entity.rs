//! Named-entity co-occurrence between an article body and a caption.
//!
//! Entities arrive already extracted; this module only normalizes them and
//! tests for exact overlap.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

fn is_edge_char(c: char) -> bool {
    c.is_whitespace() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercases, collapses internal whitespace and strips leading/trailing
/// punctuation. Returns `None` when nothing is left.
pub fn normalize_entity(raw: &str) -> Option<String> {
    let lowered = raw.to_lowercase();
    let trimmed = lowered.trim_matches(is_edge_char);
    let collapsed = trimmed.split_whitespace().collect::<Vec<_>>().join(" ");
    (!collapsed.is_empty()).then_some(collapsed)
}

/// A deduplicated set of normalized entity strings.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntitySet(BTreeSet<String>);

impl EntitySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw<I, S>(raw: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        EntitySet(raw.into_iter().filter_map(|s| normalize_entity(s.as_ref())).collect())
    }

    pub fn insert_raw(&mut self, raw: &str) -> bool {
        match normalize_entity(raw) {
            Some(e) => self.0.insert(e),
            None => false,
        }
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.0.contains(normalized)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn intersects(&self, other: &EntitySet) -> bool {
        let (small, large) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        small.0.iter().any(|e| large.0.contains(e))
    }
}

/// The binary indicator: `1.0` iff the caption mentions an entity present in the body.
pub fn compute_indicator(body: &EntitySet, caption: &EntitySet) -> f32 {
    if body.intersects(caption) {
        1.0
    } else {
        0.0
    }
}
