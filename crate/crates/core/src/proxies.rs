//! Semantic proxy storage: one JSON object per line,
//! `{"image": "<id>", "text": "<transcription>", "source": "precomputed"}`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{DomainError, ImageId, ProxySource, SemanticProxy, DEFAULT_PROXY_MAX_CHARS};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Schema { path: String, line: usize, reason: String },
    #[error("{path}:{line}: duplicate proxy for {id}")]
    Duplicate { path: String, line: usize, id: String },
}

#[derive(Deserialize)]
struct ProxyLine {
    #[serde(alias = "id")]
    image: String,
    #[serde(alias = "caption")]
    text: String,
    #[serde(default)]
    source: Option<ProxySource>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProxyStore {
    by_id: HashMap<ImageId, SemanticProxy>,
}

impl ProxyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, proxy: SemanticProxy) -> Option<SemanticProxy> {
        self.by_id.insert(proxy.image.clone(), proxy)
    }

    pub fn get(&self, id: &ImageId) -> Option<&SemanticProxy> {
        self.by_id.get(id)
    }

    pub fn text(&self, id: &ImageId) -> Option<&str> {
        self.by_id.get(id).map(|p| p.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Ids in ascending order, for stable output.
    pub fn sorted_ids(&self) -> Vec<&ImageId> {
        let mut ids: Vec<_> = self.by_id.keys().collect();
        ids.sort();
        ids
    }

    pub fn load_jsonl(path: &Path, max_chars: usize) -> Result<Self, ProxyError> {
        let display = path.display().to_string();
        let file = fs::File::open(path).map_err(|source| ProxyError::Io {
            path: display.clone(),
            source,
        })?;
        let mut store = Self::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| ProxyError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let schema = |reason: String| ProxyError::Schema {
                path: display.clone(),
                line: n + 1,
                reason,
            };
            let parsed: ProxyLine = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
            let id = ImageId::new(parsed.image).map_err(|e: DomainError| schema(e.to_string()))?;
            let proxy = SemanticProxy::new(
                id,
                parsed.text,
                parsed.source.unwrap_or(ProxySource::Precomputed),
                max_chars,
            )
            .map_err(|e| schema(e.to_string()))?;
            if let Some(prev) = store.insert(proxy) {
                return Err(ProxyError::Duplicate {
                    path: display,
                    line: n + 1,
                    id: prev.image.to_string(),
                });
            }
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, ProxyError> {
        Self::load_jsonl(path, DEFAULT_PROXY_MAX_CHARS)
    }

    /// Writes proxies sorted by id.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), ProxyError> {
        let io = |source| ProxyError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = fs::File::create(path).map_err(io)?;
        for id in self.sorted_ids() {
            let line = serde_json::to_string(&self.by_id[id]).expect("proxy serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_and_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        fs::write(
            &p,
            "{\"image\":\"b\",\"text\":\"a blue cube\"}\n\n{\"id\":\"a\",\"caption\":\"a red cone\",\"source\":\"generated\"}\n",
        )
        .unwrap();
        let store = ProxyStore::load(&p).unwrap();
        assert_eq!(store.len(), 2);
        let a = ImageId::new("a").unwrap();
        assert_eq!(store.get(&a).unwrap().source, ProxySource::Generated);

        let out = dir.path().join("out.jsonl");
        store.save_jsonl(&out).unwrap();
        assert_eq!(ProxyStore::load(&out).unwrap(), store);
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("{\"image\":\"a\""));
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        fs::write(
            &p,
            "{\"image\":\"a\",\"text\":\"x\"}\n{\"image\":\"b\",\"text\":\"\"}\n",
        )
        .unwrap();
        match ProxyStore::load(&p) {
            Err(ProxyError::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(
            &p,
            "{\"image\":\"a\",\"text\":\"x\"}\n{\"image\":\"a\",\"text\":\"y\"}\n",
        )
        .unwrap();
        assert!(matches!(
            ProxyStore::load(&p),
            Err(ProxyError::Duplicate { line: 2, .. })
        ));
        fs::write(&p, "{\"image\":\"a\",\"text\":\"xxxx\"}\n").unwrap();
        assert!(matches!(
            ProxyStore::load_jsonl(&p, 3),
            Err(ProxyError::Schema { line: 1, .. })
        ));
    }
}
