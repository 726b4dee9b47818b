//! Ranking metrics. Rankings are id slices, best first.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::domain::ImageId;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("query has no evaluation subset")]
    SubsetMissing,
}

/// 1 when any target is within the first `k` entries, else 0.
pub fn recall_at_k(ranking: &[ImageId], targets: &BTreeSet<ImageId>, k: usize) -> f64 {
    let hit = ranking.iter().take(k).any(|id| targets.contains(id));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// The ranking restricted to subset members, order kept; members the
/// ranking lacks are appended in subset order.
pub fn restrict_to_subset(ranking: &[ImageId], subset: &[ImageId]) -> Vec<ImageId> {
    let mut out: Vec<ImageId> = Vec::with_capacity(subset.len());
    for id in ranking {
        if subset.contains(id) && !out.contains(id) {
            out.push(id.clone());
        }
    }
    for id in subset {
        if !out.contains(id) {
            out.push(id.clone());
        }
    }
    out
}

pub fn recall_subset_at_k(
    ranking: &[ImageId],
    targets: &BTreeSet<ImageId>,
    subset: Option<&[ImageId]>,
    k: usize,
) -> Result<f64, MetricError> {
    let subset = subset.ok_or(MetricError::SubsetMissing)?;
    Ok(recall_at_k(&restrict_to_subset(ranking, subset), targets, k))
}

/// Truncated average precision of one query, denominator `min(|targets|, k)`.
/// The dataset figure is the mean over queries.
pub fn map_at_k(ranking: &[ImageId], targets: &BTreeSet<ImageId>, k: usize) -> f64 {
    if targets.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut seen = BTreeSet::new();
    for (i, id) in ranking.iter().take(k).enumerate() {
        if targets.contains(id) && seen.insert(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / targets.len().min(k) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(s: &[&str]) -> Vec<ImageId> {
        s.iter().map(|x| ImageId::new(*x).unwrap()).collect()
    }

    fn set(s: &[&str]) -> BTreeSet<ImageId> {
        ids(s).into_iter().collect()
    }

    #[test]
    fn recall_examples() {
        let r = ids(&["t", "a", "b", "c", "d", "e"]);
        assert_eq!(recall_at_k(&r, &set(&["t"]), 1), 1.0);
        let r = ids(&["a", "b", "c", "d", "e", "t"]);
        assert_eq!(recall_at_k(&r, &set(&["t"]), 5), 0.0);
        let r = ids(&["x", "y", "z", "A", "w"]);
        assert_eq!(recall_at_k(&r, &set(&["A", "B"]), 5), 1.0);
    }

    #[test]
    fn subset_examples() {
        let subset = ids(&["s1", "t", "s2", "s3", "s4", "s5"]);
        let r = ids(&["x", "s2", "y", "t", "s1"]);
        let t = set(&["t"]);
        assert_eq!(recall_subset_at_k(&r, &t, Some(&subset), 1), Ok(0.0));
        assert_eq!(recall_subset_at_k(&r, &t, Some(&subset), 2), Ok(1.0));
        let r = ids(&["t", "x"]);
        assert_eq!(recall_subset_at_k(&r, &t, Some(&subset), 1), Ok(1.0));
        // Target absent: restricted list is s2, s1 then the missing members in
        // subset order: t, s3, s4, s5.
        let r = ids(&["s2", "s1"]);
        assert_eq!(
            restrict_to_subset(&r, &subset),
            ids(&["s2", "s1", "t", "s3", "s4", "s5"])
        );
        assert_eq!(recall_subset_at_k(&r, &t, Some(&subset), 2), Ok(0.0));
        assert_eq!(recall_subset_at_k(&r, &t, Some(&subset), 3), Ok(1.0));
        assert_eq!(recall_subset_at_k(&r, &t, None, 3), Err(MetricError::SubsetMissing));
    }

    #[test]
    fn map_examples() {
        let r = ids(&["A", "x1", "B", "x2", "x3"]);
        let v = map_at_k(&r, &set(&["A", "B"]), 5);
        assert!((v - 0.833_333_333_333_333_4).abs() < 1e-12);
        assert_eq!(map_at_k(&ids(&["t", "a"]), &set(&["t"]), 5), 1.0);
        assert_eq!(map_at_k(&ids(&["a", "b"]), &set(&["t"]), 5), 0.0);
    }
}
