//! The three perception workers.
//!
//! * semantic imagination: the LLM describes the target, the description is
//!   embedded and ranked against the gallery (`pred` view);
//! * constraint parsing: the LLM lists object/attribute constraints, their
//!   declarative form is embedded and ranked (`key` view);
//! * reference consistency: the reference image's own embedding is ranked
//!   against the gallery (`vis` view), no LLM involved.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::domain::{ComposedQuery, ImageId, RankedList, SemanticProxy, View, DEFAULT_PROXY_MAX_CHARS};
use crate::embedder::{EmbedError, TextEmbedder};
use crate::embedstore::{EmbedStoreError, EmbeddingMatrix};
use crate::llm::{LlmError, LlmRequest, LlmSession, Role, SchemaKind, Structured};
use crate::prompts::{PromptError, PromptSet};
use crate::proxies::ProxyStore;

pub const MAX_CONSTRAINT_PAIRS: usize = 16;
pub const DEFAULT_BRANCH_DEPTH: usize = 200;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] EmbedStoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no semantic proxy for reference image {0}")]
    MissingProxy(ImageId),
    #[error("reference image {0} has no embedding")]
    UnknownReference(ImageId),
    #[error("embedder returned {got} vectors for {expected} texts")]
    EmbedCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    /// Depth of each branch ranking.
    pub top_n: usize,
    /// Cap on the imagined target description, in characters.
    pub hypothesis_max_chars: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_BRANCH_DEPTH,
            hypothesis_max_chars: DEFAULT_PROXY_MAX_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetHypothesis {
    pub query_id: String,
    pub text: String,
    /// The LLM reply was empty and the concatenation fallback was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub query_id: String,
    /// `(object, attribute)`; the attribute may be empty.
    pub pairs: Vec<(String, String)>,
    pub declarative: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintOutcome {
    pub constraints: ConstraintSet,
    /// Replies that failed to parse.
    pub malformed: u32,
    /// The single-pair fallback was used.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFailure {
    pub view: View,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutput {
    pub pred: RankedList,
    pub key: RankedList,
    pub vis: RankedList,
    pub hypothesis: Option<TargetHypothesis>,
    pub constraints: Option<ConstraintOutcome>,
    pub failures: Vec<BranchFailure>,
}

/// `"a_t o_t"` phrases joined with `", "`.
pub fn declarative_from_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(o, a)| if a.is_empty() { o.clone() } else { format!("{a} {o}") })
        .collect::<Vec<_>>()
        .join(", ")
}

fn cap_chars(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((cut, _)) => text[..cut].to_string(),
        None => text.to_string(),
    }
}

pub struct Workers {
    prompts: Arc<PromptSet>,
    embedder: Arc<dyn TextEmbedder>,
    config: PerceptionConfig,
}

impl Workers {
    pub fn new(prompts: Arc<PromptSet>, embedder: Arc<dyn TextEmbedder>, config: PerceptionConfig) -> Self {
        Self {
            prompts,
            embedder,
            config,
        }
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.config
    }

    pub async fn imagine_target(
        &self,
        session: &LlmSession,
        query_id: &str,
        proxy: &SemanticProxy,
        mod_text: &str,
    ) -> Result<TargetHypothesis, PerceptionError> {
        let prompt = self
            .prompts
            .si_worker
            .render(&[("ref_proxy", &proxy.text), ("mod_text", mod_text)])?;
        let reply = session.complete(&LlmRequest::new(Role::SiWorker, prompt)).await?;
        let text = reply.text.trim();
        let (text, fallback) = if text.is_empty() {
            (format!("{}; {}", proxy.text.trim(), mod_text.trim()), true)
        } else {
            (text.to_string(), false)
        };
        Ok(TargetHypothesis {
            query_id: query_id.to_string(),
            text: cap_chars(&text, self.config.hypothesis_max_chars),
            fallback,
        })
    }

    pub async fn parse_constraints(
        &self,
        session: &LlmSession,
        query_id: &str,
        mod_text: &str,
    ) -> Result<ConstraintOutcome, PerceptionError> {
        let prompt = self.prompts.cp_worker.render(&[("mod_text", mod_text)])?;
        let req = LlmRequest::new(Role::CpWorker, prompt);
        let outcome = session.complete_structured(&req, SchemaKind::ConstraintPairs).await?;
        let (mut pairs, declarative) = match outcome.value {
            Ok(Structured::Constraints { pairs, declarative }) => (pairs, declarative),
            Ok(_) => (Vec::new(), None),
            Err(e) => {
                warn!(query = query_id, reason = %e.reason, "constraint reply unusable, degrading");
                (Vec::new(), None)
            }
        };
        pairs.retain(|(o, _)| !o.is_empty());
        pairs.truncate(MAX_CONSTRAINT_PAIRS);
        let degraded = pairs.is_empty();
        let constraints = if degraded {
            ConstraintSet {
                query_id: query_id.to_string(),
                pairs: vec![(mod_text.to_string(), String::new())],
                declarative: mod_text.to_string(),
            }
        } else {
            let declarative = declarative.unwrap_or_else(|| declarative_from_pairs(&pairs));
            ConstraintSet {
                query_id: query_id.to_string(),
                pairs,
                declarative,
            }
        };
        Ok(ConstraintOutcome {
            constraints,
            malformed: outcome.malformed,
            degraded,
        })
    }

    async fn embed_one(&self, text: &str) -> Result<Vec<f32>, PerceptionError> {
        let mut out = self.embedder.embed(&[text.to_string()]).await?;
        if out.len() != 1 {
            return Err(PerceptionError::EmbedCount {
                expected: 1,
                got: out.len(),
            });
        }
        Ok(out.pop().expect("one vector"))
    }

    async fn pred_branch(
        &self,
        session: &LlmSession,
        query: &ComposedQuery,
        proxy: &SemanticProxy,
        gallery: &EmbeddingMatrix,
    ) -> Result<(TargetHypothesis, RankedList), PerceptionError> {
        let hyp = self
            .imagine_target(session, &query.query_id, proxy, &query.mod_text)
            .await?;
        let v = self.embed_one(&hyp.text).await?;
        let list = gallery.rank_by_vector(&v, self.config.top_n, &query.query_id, View::Pred)?;
        Ok((hyp, list))
    }

    async fn key_branch(
        &self,
        session: &LlmSession,
        query: &ComposedQuery,
        gallery: &EmbeddingMatrix,
    ) -> Result<(ConstraintOutcome, RankedList), PerceptionError> {
        let cons = self
            .parse_constraints(session, &query.query_id, &query.mod_text)
            .await?;
        let v = self.embed_one(&cons.constraints.declarative).await?;
        let list = gallery.rank_by_vector(&v, self.config.top_n, &query.query_id, View::Key)?;
        Ok((cons, list))
    }

    /// Runs all three branches. The two LLM branches run concurrently; a
    /// failing branch yields an empty list and a [`BranchFailure`].
    ///
    /// The reference vector comes from `references` when it holds the id,
    /// otherwise from the gallery.
    pub async fn run(
        &self,
        session: &LlmSession,
        query: &ComposedQuery,
        gallery: &EmbeddingMatrix,
        references: Option<&EmbeddingMatrix>,
        proxies: &ProxyStore,
    ) -> Result<WorkerOutput, PerceptionError> {
        let proxy = proxies
            .get(&query.ref_image)
            .ok_or_else(|| PerceptionError::MissingProxy(query.ref_image.clone()))?;
        let ref_vec = references
            .and_then(|r| r.vector_of(&query.ref_image))
            .or_else(|| gallery.vector_of(&query.ref_image))
            .ok_or_else(|| PerceptionError::UnknownReference(query.ref_image.clone()))?;
        let vis = gallery.rank_by_vector(ref_vec, self.config.top_n, &query.query_id, View::Vis)?;

        let (pred, key) = tokio::join!(
            self.pred_branch(session, query, proxy, gallery),
            self.key_branch(session, query, gallery)
        );
        let mut failures = Vec::new();
        let (hypothesis, pred) = match pred {
            Ok((h, l)) => (Some(h), l),
            Err(e) => {
                warn!(query = %query.query_id, error = %e, "pred branch failed");
                failures.push(BranchFailure {
                    view: View::Pred,
                    reason: e.to_string(),
                });
                (None, RankedList::empty(View::Pred, &query.query_id))
            }
        };
        let (constraints, key) = match key {
            Ok((c, l)) => (Some(c), l),
            Err(e) => {
                warn!(query = %query.query_id, error = %e, "key branch failed");
                failures.push(BranchFailure {
                    view: View::Key,
                    reason: e.to_string(),
                });
                (None, RankedList::empty(View::Key, &query.query_id))
            }
        };
        Ok(WorkerOutput {
            pred,
            key,
            vis,
            hypothesis,
            constraints,
            failures,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ProxySource;
    use crate::llm::{Gateway, LlmProvider, MockProvider, ProviderError, ProviderReply};
    use async_trait::async_trait;
    use std::sync::Mutex;

    struct Scripted(Mutex<Vec<String>>);

    #[async_trait]
    impl LlmProvider for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        async fn complete(&self, _req: &LlmRequest) -> Result<ProviderReply, ProviderError> {
            let mut q = self.0.lock().unwrap();
            Ok(ProviderReply::text(if q.is_empty() {
                String::new()
            } else {
                q.remove(0)
            }))
        }
    }

    fn session(p: Arc<dyn LlmProvider>) -> LlmSession {
        LlmSession::new(Arc::new(Gateway::builder().fallback(p).build()))
    }

    fn scripted(replies: &[&str]) -> LlmSession {
        session(Arc::new(Scripted(Mutex::new(
            replies.iter().map(|s| s.to_string()).collect(),
        ))))
    }

    fn workers() -> Workers {
        let embedder = crate::embedder::FixtureEmbedder::default();
        Workers::new(
            Arc::new(PromptSet::default()),
            Arc::new(embedder),
            PerceptionConfig::default(),
        )
    }

    fn proxy(text: &str) -> SemanticProxy {
        SemanticProxy::new(ImageId::new("r").unwrap(), text, ProxySource::Precomputed, 100).unwrap()
    }

    #[tokio::test]
    async fn mock_hypothesis_mentions_both_inputs() {
        let s = session(Arc::new(MockProvider::new(5)));
        let w = workers();
        let mut seen = Vec::new();
        for _ in 0..3 {
            let h = w
                .imagine_target(&s, "q", &proxy("a red dress"), "make it blue")
                .await
                .unwrap();
            assert!(h.text.contains("dress") && h.text.contains("blue"));
            seen.push(h.text);
        }
        assert!(seen.windows(2).all(|p| p[0] == p[1]));
    }

    #[tokio::test]
    async fn empty_generation_falls_back() {
        let w = workers();
        let h = w
            .imagine_target(&scripted(&["   "]), "q", &proxy("a red dress"), "make it blue")
            .await
            .unwrap();
        assert_eq!(h.text, "a red dress; make it blue");
        assert!(h.fallback);
    }

    #[tokio::test]
    async fn constraint_join_rule() {
        let w = workers();
        let reply =
            r#"{"pairs": [{"object": "dog", "attribute": "running"}, {"object": "background", "attribute": "beach"}]}"#;
        let out = w.parse_constraints(&scripted(&[reply]), "q", "x").await.unwrap();
        assert_eq!(out.constraints.declarative, "running dog, beach background");
        assert!(!out.degraded);
    }

    #[tokio::test]
    async fn empty_pairs_degrade() {
        let w = workers();
        let out = w
            .parse_constraints(&scripted(&[r#"{"pairs": []}"#]), "q", "make it blue")
            .await
            .unwrap();
        assert_eq!(out.constraints.pairs, vec![("make it blue".to_string(), String::new())]);
        assert_eq!(out.constraints.declarative, "make it blue");
        assert_eq!(out.malformed, 0);
    }

    #[tokio::test]
    async fn malformed_twice_degrades_and_counts() {
        let w = workers();
        let out = w
            .parse_constraints(&scripted(&["no json here", "still none"]), "q", "make it blue")
            .await
            .unwrap();
        assert!(out.degraded);
        assert_eq!(out.malformed, 2);
        assert_eq!(out.constraints.declarative, "make it blue");
    }

    #[tokio::test]
    async fn pairs_are_capped() {
        let w = workers();
        let pairs: Vec<String> = (0..20).map(|i| format!("\"obj{i}\"")).collect();
        let reply = format!("{{\"pairs\": [{}]}}", pairs.join(","));
        let out = w.parse_constraints(&scripted(&[&reply]), "q", "x").await.unwrap();
        assert_eq!(out.constraints.pairs.len(), MAX_CONSTRAINT_PAIRS);
    }
}
