//! Text embedding backends for the two text-driven perception branches.

use std::collections::HashMap;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum items per sidecar request.
pub const SIDECAR_MAX_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service request failed: {0}")]
    Http(String),
    #[error("embedding service returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("embedding protocol violation: {0}")]
    Protocol(String),
    #[error("no fixture embedding for text {0:?}")]
    UnknownText(String),
    #[error("reading embedding fixture {path}: {reason}")]
    Fixture { path: String, reason: String },
}

#[async_trait]
pub trait TextEmbedder: Send + Sync {
    /// One vector per input text, in input order.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    kind: &'a str,
    items: &'a [String],
    model_tag: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct SidecarHealth {
    pub status: String,
    pub model_tag: String,
    pub dim: usize,
}

/// HTTP client for the embedding sidecar (`POST /embed`, `GET /health`).
#[derive(Debug, Clone)]
pub struct SidecarEmbedder {
    client: reqwest::Client,
    base_url: String,
    model_tag: String,
    expected_dim: Option<usize>,
}

impl SidecarEmbedder {
    pub fn new(base_url: &str, model_tag: impl Into<String>, expected_dim: Option<usize>) -> Self {
        Self {
            client: reqwest::Client::new(),
            base_url: base_url.trim_end_matches('/').to_string(),
            model_tag: model_tag.into(),
            expected_dim,
        }
    }

    pub async fn health(&self) -> Result<SidecarHealth, EmbedError> {
        let resp = self
            .client
            .get(format!("{}/health", self.base_url))
            .send()
            .await
            .map_err(|e| EmbedError::Http(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::Status {
                status: resp.status().as_u16(),
                body: resp.text().await.unwrap_or_default(),
            });
        }
        resp.json().await.map_err(|e| EmbedError::Protocol(e.to_string()))
    }

    async fn embed_batch(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let resp = self
            .client
            .post(format!("{}/embed", self.base_url))
            .json(&EmbedRequest {
                kind: "text",
                items: batch,
                model_tag: &self.model_tag,
            })
            .send()
            .await
            .map_err(|e| EmbedError::Http(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Status {
                status: status.as_u16(),
                body: resp.text().await.unwrap_or_default(),
            });
        }
        let body: EmbedResponse = resp.json().await.map_err(|e| EmbedError::Protocol(e.to_string()))?;
        if body.vectors.len() != batch.len() {
            return Err(EmbedError::Protocol(format!(
                "sent {} items, got {} vectors",
                batch.len(),
                body.vectors.len()
            )));
        }
        if let Some(want) = self.expected_dim {
            if body.dim != want {
                return Err(EmbedError::Protocol(format!("dim {} != expected {want}", body.dim)));
            }
        }
        if let Some(bad) = body.vectors.iter().find(|v| v.len() != body.dim) {
            return Err(EmbedError::Protocol(format!(
                "vector of length {} in a dim {} reply",
                bad.len(),
                body.dim
            )));
        }
        Ok(body.vectors)
    }
}

#[async_trait]
impl TextEmbedder for SidecarEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(SIDECAR_MAX_BATCH) {
            out.extend(self.embed_batch(batch).await?);
        }
        Ok(out)
    }
}

/// Precomputed text embeddings: `{"dim": d, "texts": {"<text>": [..]}}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FixtureEmbedder {
    pub dim: usize,
    pub texts: HashMap<String, Vec<f32>>,
}

impl FixtureEmbedder {
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let fail = |reason: String| EmbedError::Fixture {
            path: path.display().to_string(),
            reason,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let fixture: Self = serde_json::from_str(&raw).map_err(|e| fail(e.to_string()))?;
        if let Some((text, v)) = fixture.texts.iter().find(|(_, v)| v.len() != fixture.dim) {
            return Err(fail(format!("vector for {text:?} has length {}", v.len())));
        }
        Ok(fixture)
    }
}

#[async_trait]
impl TextEmbedder for FixtureEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.texts
                    .get(t)
                    .cloned()
                    .ok_or_else(|| EmbedError::UnknownText(t.clone()))
            })
            .collect()
    }
}
