use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperienceError, Paradigm};

pub const DEFAULT_CAPACITY: usize = 64;
/// Items scoring below this are dropped on update.
pub const SCORE_FLOOR: f64 = 0.05;
pub const MAX_ITEM_CHARS: usize = 300;

/// Lowercased, whitespace-collapsed text used for deduplication.
pub fn normalized_key(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceItem {
    pub id: String,
    pub text: String,
    pub score: f64,
    pub paradigm: Paradigm,
    pub created_at: u64,
}

impl ExperienceItem {
    pub fn normalized_key(&self) -> String {
        normalized_key(&self.text)
    }
}

/// A heuristic proposed by distillation, before it enters the library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateExperience {
    pub text: String,
    pub score: f64,
    pub paradigm: Paradigm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceLibrary {
    pub version: u64,
    pub capacity: usize,
    pub items: Vec<ExperienceItem>,
}

impl Default for ExperienceLibrary {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((cut, _)) => &text[..cut],
        None => text,
    }
}

impl ExperienceLibrary {
    pub fn new(capacity: usize) -> Self {
        Self {
            version: 0,
            capacity,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn next_created_at(&self) -> u64 {
        self.items.iter().map(|i| i.created_at + 1).max().unwrap_or(0)
    }

    /// Best `n` items, score descending then oldest first.
    pub fn top(&self, n: usize) -> Vec<&ExperienceItem> {
        let mut items: Vec<&ExperienceItem> = self.items.iter().collect();
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.created_at.cmp(&b.created_at)));
        items.truncate(n);
        items
    }

    /// Merge, filter and condense. This is the only way items enter or leave
    /// a library.
    ///
    /// Duplicate keys keep the higher score; items under [`SCORE_FLOOR`] are
    /// dropped; over capacity, the lowest scores go first and the oldest
    /// among equal scores.
    pub fn update(&self, new_items: &[CandidateExperience]) -> ExperienceLibrary {
        let mut items = self.items.clone();
        let mut next = self.next_created_at();
        for cand in new_items {
            let text = truncate_chars(cand.text.trim(), MAX_ITEM_CHARS).trim_end();
            if text.is_empty() {
                continue;
            }
            let score = if cand.score.is_nan() {
                0.0
            } else {
                cand.score.clamp(0.0, 1.0)
            };
            let key = normalized_key(text);
            if let Some(existing) = items.iter_mut().find(|i| i.normalized_key() == key) {
                if score > existing.score {
                    existing.score = score;
                    existing.paradigm = cand.paradigm;
                }
                continue;
            }
            items.push(ExperienceItem {
                id: format!("exp-{next:04}"),
                text: text.to_string(),
                score,
                paradigm: cand.paradigm,
                created_at: next,
            });
            next += 1;
        }
        items.retain(|i| i.score >= SCORE_FLOOR);
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then(b.created_at.cmp(&a.created_at)));
        items.truncate(self.capacity);
        items.sort_by_key(|i| i.created_at);
        ExperienceLibrary {
            version: self.version + 1,
            capacity: self.capacity,
            items,
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.items.len() > self.capacity {
            return Err(format!("{} items over capacity {}", self.items.len(), self.capacity));
        }
        let mut keys = std::collections::HashSet::new();
        for item in &self.items {
            if item.text.trim().is_empty() {
                return Err(format!("{} has empty text", item.id));
            }
            if !(0.0..=1.0).contains(&item.score) {
                return Err(format!("{} score {} out of range", item.id, item.score));
            }
            if !keys.insert(item.normalized_key()) {
                return Err(format!("duplicate key for {}", item.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("library serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperienceError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| ExperienceError::io(path, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| ExperienceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ExperienceError> {
        let raw = fs::read_to_string(path).map_err(|e| ExperienceError::io(path, e))?;
        let lib: Self = serde_json::from_str(&raw).map_err(|e| ExperienceError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        lib.check_invariants().map_err(|reason| ExperienceError::Format {
            path: path.display().to_string(),
            reason,
        })?;
        Ok(lib)
    }
}
