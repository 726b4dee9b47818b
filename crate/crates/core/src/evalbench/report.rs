//! Per-query records, aggregates, and their JSON, table and CSV renderings.
//!
//! Per-query metric values are fractions in [0, 1]. Aggregates are their
//! means expressed as percentages (0 to 100), unrounded in JSON and shown
//! with two decimals in the table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{map_at_k, recall_at_k, recall_subset_at_k};
use crate::deliberation::PageDecision;
use crate::domain::ImageId;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];
pub const MAP_KS: [usize; 4] = [5, 10, 25, 50];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a run report: {reason}")]
    Format { path: String, reason: String },
    #[error("no reports to combine")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub value: f64,
}

fn at(list: &[AtK], k: usize) -> Option<f64> {
    list.iter().find(|a| a.k == k).map(|a| a.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub recall: Vec<AtK>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_subset: Option<Vec<AtK>>,
    pub map: Vec<AtK>,
}

impl QueryMetrics {
    pub fn score(ranking: &[ImageId], targets: &BTreeSet<ImageId>, subset: Option<&[ImageId]>) -> Self {
        Self {
            recall: RECALL_KS
                .iter()
                .map(|&k| AtK {
                    k,
                    value: recall_at_k(ranking, targets, k),
                })
                .collect(),
            recall_subset: subset.map(|s| {
                SUBSET_KS
                    .iter()
                    .map(|&k| AtK {
                        k,
                        value: recall_subset_at_k(ranking, targets, Some(s), k).expect("subset given"),
                    })
                    .collect()
            }),
            map: MAP_KS
                .iter()
                .map(|&k| AtK {
                    k,
                    value: map_at_k(ranking, targets, k),
                })
                .collect(),
        }
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        at(&self.recall, k)
    }

    pub fn map(&self, k: usize) -> Option<f64> {
        at(&self.map, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub targets: BTreeSet<ImageId>,
    /// Deliberated ranking, best first.
    pub final_ranking: Vec<ImageId>,
    /// Fused candidate buffer before deliberation.
    pub fused_ranking: Vec<ImageId>,
    pub metrics: QueryMetrics,
    pub fused_metrics: QueryMetrics,
    /// Intent weights used for fusion, in pred, key, vis order.
    pub weights: [f64; 3],
    pub router_fallback: bool,
    pub tokens_out: u64,
    pub deliberation_tokens_out: u64,
    pub decisions: Vec<PageDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
    /// The query produced no ranking; its metrics count as zero.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_queries: usize,
    pub n_failed: usize,
    pub recall: Vec<AtK>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_subset: Option<Vec<AtK>>,
    pub map: Vec<AtK>,
    pub total_tokens_out: u64,
    pub mean_tokens_out: f64,
}

fn mean_percent<'a>(values: impl Iterator<Item = &'a [AtK]>, ks: &[usize], n: usize) -> Vec<AtK> {
    let mut sums = vec![0.0; ks.len()];
    for v in values {
        for (i, k) in ks.iter().enumerate() {
            sums[i] += at(v, *k).unwrap_or(0.0);
        }
    }
    ks.iter()
        .zip(sums)
        .map(|(&k, s)| AtK {
            k,
            value: if n == 0 { 0.0 } else { 100.0 * s / n as f64 },
        })
        .collect()
}

impl Aggregates {
    /// Means over all records; `fused` selects the pre-deliberation metrics.
    pub fn over(records: &[QueryRecord], fused: bool) -> Self {
        let n = records.len();
        fn pick(r: &QueryRecord, fused: bool) -> &QueryMetrics {
            if fused {
                &r.fused_metrics
            } else {
                &r.metrics
            }
        }
        let with_subset: Vec<&[AtK]> = records
            .iter()
            .filter_map(|r| pick(r, fused).recall_subset.as_deref())
            .collect();
        let total_tokens_out = records.iter().map(|r| r.tokens_out).sum::<u64>();
        Self {
            n_queries: n,
            n_failed: records.iter().filter(|r| r.failed).count(),
            recall: mean_percent(records.iter().map(|r| pick(r, fused).recall.as_slice()), &RECALL_KS, n),
            recall_subset: (!with_subset.is_empty())
                .then(|| mean_percent(with_subset.iter().copied(), &SUBSET_KS, with_subset.len())),
            map: mean_percent(records.iter().map(|r| pick(r, fused).map.as_slice()), &MAP_KS, n),
            total_tokens_out,
            mean_tokens_out: if n == 0 {
                0.0
            } else {
                total_tokens_out as f64 / n as f64
            },
        }
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        at(&self.recall, k)
    }

    pub fn map(&self, k: usize) -> Option<f64> {
        at(&self.map, k)
    }

    /// Unweighted mean of several aggregates (e.g. per-category runs).
    pub fn average(parts: &[Aggregates]) -> Result<Aggregates, ReportError> {
        if parts.is_empty() {
            return Err(ReportError::Empty);
        }
        let m = parts.len() as f64;
        let avg = |get: &dyn Fn(&Aggregates) -> &[AtK], ks: &[usize]| -> Vec<AtK> {
            ks.iter()
                .map(|&k| AtK {
                    k,
                    value: parts.iter().map(|p| at(get(p), k).unwrap_or(0.0)).sum::<f64>() / m,
                })
                .collect()
        };
        let subsets: Vec<&Aggregates> = parts.iter().filter(|p| p.recall_subset.is_some()).collect();
        let recall_subset = (!subsets.is_empty()).then(|| {
            SUBSET_KS
                .iter()
                .map(|&k| AtK {
                    k,
                    value: subsets
                        .iter()
                        .map(|p| at(p.recall_subset.as_deref().unwrap_or(&[]), k).unwrap_or(0.0))
                        .sum::<f64>()
                        / subsets.len() as f64,
                })
                .collect()
        });
        Ok(Aggregates {
            n_queries: parts.iter().map(|p| p.n_queries).sum(),
            n_failed: parts.iter().map(|p| p.n_failed).sum(),
            recall: avg(&|p| &p.recall, &RECALL_KS),
            recall_subset,
            map: avg(&|p| &p.map, &MAP_KS),
            total_tokens_out: parts.iter().map(|p| p.total_tokens_out).sum(),
            mean_tokens_out: parts.iter().map(|p| p.mean_tokens_out).sum::<f64>() / m,
        })
    }
}

/// Settings a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub tier: String,
    pub seed: u64,
    pub fusion_mode: String,
    pub tau: f64,
    pub k: usize,
    pub stages: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_override: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub settings: RunSettings,
    pub aggregates: Aggregates,
    pub fused_aggregates: Aggregates,
    /// Omitted for deterministic tiers so their reports stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    pub queries: Vec<QueryRecord>,
}

impl RunReport {
    pub fn new(settings: RunSettings, queries: Vec<QueryRecord>, wall_clock_secs: Option<f64>) -> Self {
        Self {
            aggregates: Aggregates::over(&queries, false),
            fused_aggregates: Aggregates::over(&queries, true),
            settings,
            wall_clock_secs,
            queries,
        }
    }

    pub fn failure_rate(&self) -> f64 {
        if self.queries.is_empty() {
            0.0
        } else {
            self.aggregates.n_failed as f64 / self.queries.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| ReportError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        fs::write(path, self.to_json()).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let raw = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| ReportError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Aligned plain-text table, one row per labeled aggregate.
pub fn render_table(rows: &[(&str, &Aggregates)]) -> String {
    let with_subset = rows.iter().any(|(_, a)| a.recall_subset.is_some());
    let mut header: Vec<String> = vec!["run".into(), "n".into(), "failed".into()];
    header.extend(RECALL_KS.iter().map(|k| format!("R@{k}")));
    if with_subset {
        header.extend(SUBSET_KS.iter().map(|k| format!("Rs@{k}")));
    }
    header.extend(MAP_KS.iter().map(|k| format!("mAP@{k}")));
    header.push("tokens/q".into());

    let mut body: Vec<Vec<String>> = Vec::new();
    for (label, a) in rows {
        let mut cells = vec![label.to_string(), a.n_queries.to_string(), a.n_failed.to_string()];
        cells.extend(a.recall.iter().map(|v| format!("{:.2}", v.value)));
        if with_subset {
            match &a.recall_subset {
                Some(s) => cells.extend(s.iter().map(|v| format!("{:.2}", v.value))),
                None => cells.extend(SUBSET_KS.iter().map(|_| "-".to_string())),
            }
        }
        cells.extend(a.map.iter().map(|v| format!("{:.2}", v.value)));
        cells.push(format!("{:.1}", a.mean_tokens_out));
        body.push(cells);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header[i])
                .chain(body.iter().map(|r| &r[i]))
                .map(String::len)
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(body.iter()) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

pub const SWEEP_CSV_HEADER: &str = "k,map@5,map@10,map@25,map@50,mean_tokens";

/// One CSV row per candidate-pool size.
pub fn sweep_csv(rows: &[(usize, Aggregates)]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (k, a) in rows {
        let maps: Vec<String> = MAP_KS
            .iter()
            .map(|m| format!("{:.4}", a.map(*m).unwrap_or(0.0)))
            .collect();
        let _ = writeln!(out, "{k},{},{:.4}", maps.join(","), a.mean_tokens_out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(s: &[&str]) -> Vec<ImageId> {
        s.iter().map(|x| ImageId::new(*x).unwrap()).collect()
    }

    fn record(q: &str, ranking: &[&str], target: &str, tokens: u64, subset: Option<&[&str]>) -> QueryRecord {
        let targets: BTreeSet<ImageId> = ids(&[target]).into_iter().collect();
        let subset = subset.map(ids);
        let m = QueryMetrics::score(&ids(ranking), &targets, subset.as_deref());
        QueryRecord {
            query_id: q.into(),
            targets,
            final_ranking: ids(ranking),
            fused_ranking: ids(ranking),
            fused_metrics: m.clone(),
            metrics: m,
            weights: [1.0 / 3.0; 3],
            router_fallback: false,
            tokens_out: tokens,
            deliberation_tokens_out: 0,
            decisions: vec![],
            failures: vec![],
            failed: false,
        }
    }

    #[test]
    fn aggregates_are_percent_means() {
        let rs = vec![
            record("a", &["t", "x"], "t", 10, None),
            record("b", &["x", "y", "t"], "t", 5, None),
        ];
        let a = Aggregates::over(&rs, false);
        assert_eq!(a.recall(1), Some(50.0));
        assert_eq!(a.recall(5), Some(100.0));
        assert!((a.map(5).unwrap() - 100.0 * (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-9);
        assert_eq!(a.total_tokens_out, 15);
        assert_eq!(a.mean_tokens_out, 7.5);
        assert!(a.recall_subset.is_none());
    }

    #[test]
    fn subset_aggregate_only_over_queries_with_subsets() {
        let s = ["t", "s1", "s2", "s3", "s4", "s5"];
        let rs = vec![
            record("a", &["s1", "t"], "t", 1, Some(&s)),
            record("b", &["x"], "t", 1, None),
        ];
        let a = Aggregates::over(&rs, false);
        let rs1 = a.recall_subset.unwrap();
        assert_eq!(rs1[0], AtK { k: 1, value: 0.0 });
        assert_eq!(rs1[1], AtK { k: 2, value: 100.0 });
        let t = render_table(&[("run", &Aggregates::over(&rs, false))]);
        assert!(t.contains("Rs@2"));
    }

    #[test]
    fn average_and_csv() {
        let a = Aggregates::over(&[record("a", &["t"], "t", 4, None)], false);
        let b = Aggregates::over(&[record("b", &["x"], "t", 8, None)], false);
        let m = Aggregates::average(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.recall(1), Some(50.0));
        assert_eq!(m.mean_tokens_out, 6.0);
        let csv = sweep_csv(&[(10, a), (50, b)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines[1], "10,100.0000,100.0000,100.0000,100.0000,4.0000");
        assert_eq!(lines.len(), 3);
        assert!(Aggregates::average(&[]).is_err());
    }

    #[test]
    fn report_round_trips() {
        let settings = RunSettings {
            tier: "mock".into(),
            seed: 1,
            fusion_mode: "ipr".into(),
            tau: 60.0,
            k: 50,
            stages: 2,
            strategy_override: None,
            dataset: None,
        };
        let r = RunReport::new(settings, vec![record("a", &["t"], "t", 3, None)], None);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out/report.json");
        r.save(&p).unwrap();
        assert_eq!(RunReport::load(&p).unwrap(), r);
        assert!(!r.to_json().contains("wall_clock"));
    }
}
