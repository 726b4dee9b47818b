//! Shared identifiers and value types.
//!
//! Everything here is immutable once constructed and cheap to share across
//! tasks. Ranks are 1-based throughout the crate.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on a semantic proxy, in characters.
pub const DEFAULT_PROXY_MAX_CHARS: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("image id must be non-empty")]
    EmptyImageId,
    #[error("image id {0:?} contains control characters")]
    ControlCharInId(String),
    #[error("query {0}: modification text is empty")]
    EmptyModText(String),
    #[error("query {query}: subset must have exactly 6 members, got {len}")]
    BadSubsetLen { query: String, len: usize },
    #[error("query {query}: ground truth {target} missing from subset")]
    TargetOutsideSubset { query: String, target: String },
    #[error("proxy for {0} is empty")]
    EmptyProxy(String),
    #[error("proxy for {id} has {len} characters (max {max})")]
    ProxyTooLong { id: String, len: usize, max: usize },
    #[error("ranked list has duplicate id {0}")]
    DuplicateRankedId(String),
    #[error("ranked list is not sorted at position {0}")]
    UnsortedRankedList(usize),
}

/// Opaque gallery image identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageId(String);

impl ImageId {
    pub fn new(value: impl Into<String>) -> Result<Self, DomainError> {
        let value = value.into();
        if value.is_empty() {
            return Err(DomainError::EmptyImageId);
        }
        if value.chars().any(char::is_control) {
            return Err(DomainError::ControlCharInId(value));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ImageId {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ImageId> for String {
    fn from(id: ImageId) -> Self {
        id.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for ImageId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// A reference image plus a modification instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedQuery {
    pub query_id: String,
    pub ref_image: ImageId,
    pub mod_text: String,
    /// Empty at inference time.
    #[serde(default)]
    pub ground_truth: BTreeSet<ImageId>,
    /// CIRR-style six member subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<ImageId>>,
}

impl ComposedQuery {
    pub fn new(
        query_id: impl Into<String>,
        ref_image: ImageId,
        mod_text: impl Into<String>,
        ground_truth: BTreeSet<ImageId>,
        subset: Option<Vec<ImageId>>,
    ) -> Result<Self, DomainError> {
        let query = Self {
            query_id: query_id.into(),
            ref_image,
            mod_text: mod_text.into(),
            ground_truth,
            subset,
        };
        query.validate()?;
        Ok(query)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.mod_text.trim().is_empty() {
            return Err(DomainError::EmptyModText(self.query_id.clone()));
        }
        if let Some(subset) = &self.subset {
            if subset.len() != 6 {
                return Err(DomainError::BadSubsetLen {
                    query: self.query_id.clone(),
                    len: subset.len(),
                });
            }
            if let Some(missing) = self.ground_truth.iter().find(|t| !subset.contains(t)) {
                return Err(DomainError::TargetOutsideSubset {
                    query: self.query_id.clone(),
                    target: missing.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxySource {
    Precomputed,
    Generated,
}

/// Dense natural-language transcription of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticProxy {
    pub image: ImageId,
    pub text: String,
    pub source: ProxySource,
}

impl SemanticProxy {
    pub fn new(
        image: ImageId,
        text: impl Into<String>,
        source: ProxySource,
        max_chars: usize,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyProxy(image.to_string()));
        }
        let len = text.chars().count();
        if len > max_chars {
            return Err(DomainError::ProxyTooLong {
                id: image.to_string(),
                len,
                max: max_chars,
            });
        }
        Ok(Self { image, text, source })
    }
}

/// Which ranking a [`RankedList`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Pred,
    Key,
    Vis,
    Fused,
    /// Buffer after deliberation.
    Final,
}

impl View {
    pub const BRANCHES: [View; 3] = [View::Pred, View::Key, View::Vis];
}

/// Orders `(score desc, id asc)`; NaN sorts last.
pub(crate) fn rank_order(a: &(ImageId, f64), b: &(ImageId, f64)) -> Ordering {
    match b.1.partial_cmp(&a.1) {
        Some(Ordering::Equal) | None => {
            // NaN scores go to the end deterministically.
            match (a.1.is_nan(), b.1.is_nan()) {
                (true, false) => Ordering::Greater,
                (false, true) => Ordering::Less,
                _ => a.0.cmp(&b.0),
            }
        }
        Some(ord) => ord,
    }
}

/// An ordered list of `(id, score)` pairs, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub view: View,
    pub produced_for: String,
    entries: Vec<(ImageId, f64)>,
}

impl RankedList {
    /// Sorts by score descending, then id ascending. Duplicate ids are rejected.
    pub fn from_unsorted(
        view: View,
        produced_for: impl Into<String>,
        mut entries: Vec<(ImageId, f64)>,
    ) -> Result<Self, DomainError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (id, _) in &entries {
            if !seen.insert(id) {
                return Err(DomainError::DuplicateRankedId(id.to_string()));
            }
        }
        entries.sort_by(rank_order);
        Ok(Self {
            view,
            produced_for: produced_for.into(),
            entries,
        })
    }

    /// Accepts entries already in rank order; checks ordering and uniqueness.
    pub fn from_sorted(
        view: View,
        produced_for: impl Into<String>,
        entries: Vec<(ImageId, f64)>,
    ) -> Result<Self, DomainError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if !seen.insert(id) {
                return Err(DomainError::DuplicateRankedId(id.to_string()));
            }
            if i > 0 && rank_order(&entries[i - 1], &entries[i]) == Ordering::Greater {
                return Err(DomainError::UnsortedRankedList(i));
            }
        }
        Ok(Self {
            view,
            produced_for: produced_for.into(),
            entries,
        })
    }

    pub fn empty(view: View, produced_for: impl Into<String>) -> Self {
        Self {
            view,
            produced_for: produced_for.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(ImageId, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &ImageId> {
        self.entries.iter().map(|(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based rank of `id`, or `None` when absent.
    pub fn rank_of(&self, id: &ImageId) -> Option<usize> {
        self.entries.iter().position(|(e, _)| e == id).map(|p| p + 1)
    }
}

/// Free-function form of [`RankedList::rank_of`].
pub fn rank_of(list: &RankedList, id: &ImageId) -> Option<usize> {
    list.rank_of(id)
}
