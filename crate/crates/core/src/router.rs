//! Intent routing, weighted reciprocal-rank fusion and the candidate buffer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::domain::{rank_order, ImageId, RankedList, View};
use crate::llm::{parse_structured, reprompt, LlmRequest, LlmSession, Role, SchemaKind, Structured};
use crate::prompts::{PromptError, PromptSet};

pub const DEFAULT_TAU: f64 = 60.0;
pub const DEFAULT_K: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("query {0}: every branch ranking is empty")]
    AllBranchesEmpty(String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("invalid intent weights {0:?}")]
    InvalidWeights([f64; 3]),
}

/// Non-negative per-view weights summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct IntentWeights {
    pred: f64,
    key: f64,
    vis: f64,
}

impl IntentWeights {
    pub const UNIFORM: IntentWeights = IntentWeights {
        pred: 1.0 / 3.0,
        key: 1.0 / 3.0,
        vis: 1.0 / 3.0,
    };

    /// Clamps negative components to 0 and renormalizes. Fails when nothing
    /// positive remains or a component is not finite.
    pub fn normalized(raw: [f64; 3]) -> Result<Self, FusionError> {
        if raw.iter().any(|w| !w.is_finite()) {
            return Err(FusionError::InvalidWeights(raw));
        }
        let clamped = raw.map(|w| w.max(0.0));
        let sum: f64 = clamped.iter().sum();
        if sum <= 0.0 {
            return Err(FusionError::InvalidWeights(raw));
        }
        Ok(Self {
            pred: clamped[0] / sum,
            key: clamped[1] / sum,
            vis: clamped[2] / sum,
        })
    }

    pub fn pred(&self) -> f64 {
        self.pred
    }

    pub fn key(&self) -> f64 {
        self.key
    }

    pub fn vis(&self) -> f64 {
        self.vis
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.pred, self.key, self.vis]
    }
}

impl TryFrom<[f64; 3]> for IntentWeights {
    type Error = FusionError;

    fn try_from(raw: [f64; 3]) -> Result<Self, Self::Error> {
        Self::normalized(raw)
    }
}

impl From<IntentWeights> for [f64; 3] {
    fn from(w: IntentWeights) -> Self {
        w.as_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Per-query weights from the intent router.
    Ipr,
    /// One configured weight vector for every query.
    Static,
    /// Uniform weights.
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub tau: f64,
    pub k: usize,
    pub static_weights: IntentWeights,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Ipr,
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            static_weights: IntentWeights::normalized([0.5, 0.3, 0.2]).expect("valid"),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(FusionError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.k < 2 {
            return Err(FusionError::InvalidConfig(format!("k must be >= 2, got {}", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub weights: IntentWeights,
    /// Uniform weights were substituted.
    pub fallback: bool,
    pub reason: Option<String>,
    pub tokens_out: u64,
}

/// Asks the router for intent weights. Two attempts; after that the uniform
/// vector is returned and the reason logged.
pub async fn route_intent(
    session: &LlmSession,
    prompts: &PromptSet,
    mod_text: &str,
) -> Result<RouteOutcome, PromptError> {
    let base = prompts.ir_router.render(&[("mod_text", mod_text)])?;
    let mut prompt = base.clone();
    let mut tokens_out = 0;
    let mut reason = String::new();
    for _ in 0..2 {
        match session
            .complete(&LlmRequest::new(Role::IrRouter, prompt.clone()).structured())
            .await
        {
            Ok(reply) => {
                tokens_out += reply.tokens_out;
                match parse_structured(&reply.text, SchemaKind::Weights) {
                    Ok(Structured::Weights(raw)) => match IntentWeights::normalized(raw) {
                        Ok(weights) => {
                            return Ok(RouteOutcome {
                                weights,
                                fallback: false,
                                reason: None,
                                tokens_out,
                            })
                        }
                        Err(e) => reason = e.to_string(),
                    },
                    Ok(_) => reason = "unexpected reply shape".into(),
                    Err(e) => {
                        reason = e.to_string();
                        prompt = reprompt(&base, &e);
                    }
                }
            }
            Err(e) => reason = e.to_string(),
        }
    }
    warn!(%reason, "intent routing failed, using uniform weights");
    Ok(RouteOutcome {
        weights: IntentWeights::UNIFORM,
        fallback: true,
        reason: Some(reason),
        tokens_out,
    })
}

/// The three branch rankings of one query.
#[derive(Debug, Clone, Copy)]
pub struct Branches<'a> {
    pub pred: &'a RankedList,
    pub key: &'a RankedList,
    pub vis: &'a RankedList,
}

/// Top-k fused candidates of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateBuffer {
    pub query_id: String,
    entries: Vec<(ImageId, f64)>,
    pub weights_used: IntentWeights,
}

impl CandidateBuffer {
    pub fn entries(&self) -> &[(ImageId, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 0-based buffer position.
    pub fn position(&self, id: &ImageId) -> Option<usize> {
        self.entries.iter().position(|(e, _)| e == id)
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.position(id).is_some()
    }

    /// First ⌈n/2⌉ entries and the rest.
    pub fn split_pages(&self) -> (Vec<ImageId>, Vec<ImageId>) {
        let mut pages = self.pages(2);
        let second = pages.pop().unwrap_or_default();
        let first = pages.pop().unwrap_or_default();
        (first, second)
    }

    /// `count` contiguous pages of ⌈n/count⌉ entries; trailing pages may be
    /// short or empty.
    pub fn pages(&self, count: usize) -> Vec<Vec<ImageId>> {
        if count == 0 {
            return Vec::new();
        }
        let size = self.len().div_ceil(count).max(1);
        let ids = self.ids();
        (0..count)
            .map(|p| {
                let start = (p * size).min(ids.len());
                let end = ((p + 1) * size).min(ids.len());
                ids[start..end].to_vec()
            })
            .collect()
    }

    pub fn to_ranked_list(&self) -> RankedList {
        RankedList::from_sorted(View::Fused, &self.query_id, self.entries.clone()).expect("buffer is sorted and unique")
    }
}

/// Weighted reciprocal-rank fusion truncated to `cfg.k`.
///
/// An id missing from a branch gets rank `len(branch) + 1` there. Empty
/// branches contribute nothing. Ids retrieved by no branch are excluded.
pub fn fuse(branches: Branches<'_>, w: &IntentWeights, cfg: &FusionConfig) -> Result<CandidateBuffer, FusionError> {
    cfg.validate()?;
    let lists = [(branches.pred, w.pred), (branches.key, w.key), (branches.vis, w.vis)];
    let query_id = lists
        .iter()
        .find(|(l, _)| !l.is_empty())
        .map(|(l, _)| l.produced_for.clone())
        .ok_or_else(|| FusionError::AllBranchesEmpty(branches.pred.produced_for.clone()))?;

    let ranks: Vec<HashMap<&ImageId, usize>> = lists
        .iter()
        .map(|(l, _)| l.ids().enumerate().map(|(i, id)| (id, i + 1)).collect())
        .collect();
    let mut union: Vec<&ImageId> = lists.iter().flat_map(|(l, _)| l.ids()).collect();
    union.sort();
    union.dedup();

    let mut scored: Vec<(ImageId, f64)> = union
        .into_iter()
        .map(|id| {
            let mut s = 0.0;
            for ((list, weight), rank) in lists.iter().zip(&ranks) {
                if list.is_empty() {
                    continue;
                }
                let r = rank.get(id).copied().unwrap_or(list.len() + 1);
                s += weight / (r as f64 + cfg.tau);
            }
            (id.clone(), s)
        })
        .collect();
    scored.sort_by(rank_order);
    scored.truncate(cfg.k);
    Ok(CandidateBuffer {
        query_id,
        entries: scored,
        weights_used: *w,
    })
}
