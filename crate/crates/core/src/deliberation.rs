//! Page-wise tournament re-ranking of the candidate buffer.
//!
//! Sequential: pages are judged in order, each page's winner is carried into
//! the next page as the leading candidate. Parallel: every page is judged
//! independently and the picks are merged. Either way the final ranking is the
//! selected ids followed by the rest of the buffer in fused order.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::domain::{ImageId, RankedList, View};
use crate::experience::ExperienceLibrary;
use crate::llm::{LlmError, LlmRequest, LlmSession, Role, SchemaKind, Structured};
use crate::prompts::{markup, PromptError, PromptSet};
use crate::proxies::ProxyStore;
use crate::router::CandidateBuffer;

pub const DEFAULT_STAGES: usize = 2;
pub const MAX_STAGES: usize = 4;
pub const DEFAULT_EXPERIENCE_IN_PROMPT: usize = 8;
pub const PARSE_FAILURE: &str = "parse-failure";

#[derive(Debug, Error)]
pub enum DeliberationError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no semantic proxy for candidate {0}")]
    MissingProxy(ImageId),
    #[error("stages must be between 0 and {MAX_STAGES}, got {0}")]
    BadStages(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sequential,
    Parallel,
}

/// Parallel for multi-target task families, sequential otherwise.
pub fn choose_strategy(multi_gt: Option<bool>) -> Strategy {
    match multi_gt {
        Some(true) => Strategy::Parallel,
        _ => Strategy::Sequential,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PickMode {
    PickOne,
    PickMany,
}

impl PickMode {
    fn instruction(self) -> &'static str {
        match self {
            PickMode::PickOne => "<mode>pick_one</mode> Select at most one candidate: the single best match.",
            PickMode::PickMany => "<mode>pick_many</mode> Select every candidate that satisfies the query.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageDecision {
    pub page_index: usize,
    pub selected: Vec<ImageId>,
    pub next_page: bool,
    pub rationale: String,
    pub tokens_out: u64,
    /// Ids named by the judge that were not on the page.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationResult {
    pub query_id: String,
    pub final_ranking: RankedList,
    pub selected: Vec<ImageId>,
    pub strategy: Strategy,
    pub stages_used: usize,
    pub total_tokens_out: u64,
    pub decisions: Vec<PageDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeliberationConfig {
    /// Number of pages the buffer is cut into; 0 disables deliberation.
    pub stages: usize,
    pub strategy_override: Option<Strategy>,
    /// Experience items shown per page prompt.
    pub experience_in_prompt: usize,
}

impl Default for DeliberationConfig {
    fn default() -> Self {
        Self {
            stages: DEFAULT_STAGES,
            strategy_override: None,
            experience_in_prompt: DEFAULT_EXPERIENCE_IN_PROMPT,
        }
    }
}

impl DeliberationConfig {
    pub fn validate(&self) -> Result<(), DeliberationError> {
        if self.stages > MAX_STAGES {
            return Err(DeliberationError::BadStages(self.stages));
        }
        Ok(())
    }
}

/// What the judge sees about the query.
#[derive(Debug, Clone, Copy)]
pub struct QueryView<'a> {
    pub query_id: &'a str,
    pub ref_proxy: &'a str,
    pub mod_text: &'a str,
    pub hypothesis: Option<&'a str>,
}

/// One page ready for rendering: `(id, proxy text)` in display order.
pub struct Page<'a> {
    pub index: usize,
    pub of: usize,
    pub candidates: Vec<(&'a ImageId, &'a str)>,
    pub leading: Option<&'a ImageId>,
}

pub fn render_experience(library: &ExperienceLibrary, n: usize) -> String {
    let top = library.top(n);
    if top.is_empty() {
        return "(none)".to_string();
    }
    top.iter()
        .map(|i| format!("- {}", i.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the judge prompt for one page.
pub fn render_page_prompt(
    prompts: &PromptSet,
    query: &QueryView<'_>,
    page: &Page<'_>,
    experience: &str,
    mode: PickMode,
) -> Result<String, PromptError> {
    let query_block = markup::query_block(query.query_id, query.ref_proxy, query.mod_text, query.hypothesis);
    let mut cands = markup::page_header(page.index, page.of);
    for (n, (id, proxy)) in page.candidates.iter().enumerate() {
        cands.push('\n');
        let leading = page.leading == Some(*id);
        cands.push_str(&markup::candidate(id.as_str(), n + 1, leading, &markup::escape(proxy)));
    }
    prompts.de_judge.render(&[
        ("query", &query_block),
        ("experience", experience),
        ("leading", &markup::leading(page.leading.map(ImageId::as_str))),
        ("candidates", &cands),
        ("mode", mode.instruction()),
    ])
}

/// Maps a parsed judge reply onto page ids: off-page ids are dropped,
/// duplicates removed, `pick_one` keeps the first. A non-empty selection
/// overrides a `next_page` flag.
pub fn decision_from_reply(
    page_index: usize,
    page_ids: &[&ImageId],
    selected: &[String],
    rationale: String,
    mode: PickMode,
    tokens_out: u64,
) -> PageDecision {
    let mut picked: Vec<ImageId> = Vec::new();
    let mut dropped = Vec::new();
    for s in selected {
        match page_ids.iter().find(|id| id.as_str() == s.trim()) {
            Some(id) => {
                if !picked.contains(id) {
                    picked.push((*id).clone());
                }
            }
            None => dropped.push(s.clone()),
        }
    }
    if !dropped.is_empty() {
        warn!(page = page_index, ?dropped, "judge named ids that are not on the page");
    }
    if mode == PickMode::PickOne {
        picked.truncate(1);
    }
    PageDecision {
        page_index,
        next_page: picked.is_empty(),
        selected: picked,
        rationale,
        tokens_out,
        dropped,
    }
}

/// Selected ids first, then the rest of the buffer in fused order. Scores
/// count down from the buffer length.
pub fn final_ranking(buffer: &CandidateBuffer, selected: &[ImageId]) -> RankedList {
    let chosen: HashSet<&ImageId> = selected.iter().collect();
    let order = selected.iter().filter(|id| buffer.contains(id)).cloned().chain(
        buffer
            .entries()
            .iter()
            .map(|(id, _)| id.clone())
            .filter(|id| !chosen.contains(id)),
    );
    let n = buffer.len();
    let entries: Vec<(ImageId, f64)> = order.enumerate().map(|(i, id)| (id, (n - i) as f64)).collect();
    RankedList::from_sorted(View::Final, &buffer.query_id, entries).expect("permutation of the buffer")
}

pub struct Deliberator {
    prompts: Arc<PromptSet>,
    config: DeliberationConfig,
}

impl Deliberator {
    pub fn new(prompts: Arc<PromptSet>, config: DeliberationConfig) -> Result<Self, DeliberationError> {
        config.validate()?;
        Ok(Self { prompts, config })
    }

    pub fn config(&self) -> &DeliberationConfig {
        &self.config
    }

    pub fn strategy_for(&self, multi_gt: Option<bool>) -> Strategy {
        self.config
            .strategy_override
            .unwrap_or_else(|| choose_strategy(multi_gt))
    }

    /// One judge call over one page. An unparseable reply after the
    /// re-prompt counts as `next_page`.
    pub async fn judge_page(
        &self,
        session: &LlmSession,
        query: &QueryView<'_>,
        page: &Page<'_>,
        experience: &ExperienceLibrary,
        mode: PickMode,
    ) -> Result<PageDecision, DeliberationError> {
        let exp = render_experience(experience, self.config.experience_in_prompt);
        let prompt = render_page_prompt(&self.prompts, query, page, &exp, mode)?;
        let req = LlmRequest::new(Role::DeJudge, prompt);
        let outcome = session.complete_structured(&req, SchemaKind::PageDecision).await?;
        let mut ids: Vec<&ImageId> = page.candidates.iter().map(|(id, _)| *id).collect();
        if let Some(lead) = page.leading {
            if !ids.contains(&lead) {
                ids.push(lead);
            }
        }
        Ok(match outcome.value {
            Ok(Structured::Decision {
                selected, rationale, ..
            }) => decision_from_reply(page.index, &ids, &selected, rationale, mode, outcome.tokens_out),
            _ => {
                warn!(query = query.query_id, page = page.index, "judge reply unparseable");
                PageDecision {
                    page_index: page.index,
                    selected: Vec::new(),
                    next_page: true,
                    rationale: PARSE_FAILURE.to_string(),
                    tokens_out: outcome.tokens_out,
                    dropped: Vec::new(),
                }
            }
        })
    }

    fn with_proxies<'a>(
        ids: &'a [ImageId],
        proxies: &'a ProxyStore,
    ) -> Result<Vec<(&'a ImageId, &'a str)>, DeliberationError> {
        ids.iter()
            .map(|id| {
                proxies
                    .text(id)
                    .map(|t| (id, t))
                    .ok_or_else(|| DeliberationError::MissingProxy(id.clone()))
            })
            .collect()
    }

    fn finish(
        buffer: &CandidateBuffer,
        strategy: Strategy,
        selected: Vec<ImageId>,
        decisions: Vec<PageDecision>,
    ) -> DeliberationResult {
        DeliberationResult {
            query_id: buffer.query_id.clone(),
            final_ranking: final_ranking(buffer, &selected),
            selected,
            strategy,
            stages_used: decisions.len(),
            total_tokens_out: decisions.iter().map(|d| d.tokens_out).sum(),
            decisions,
        }
    }

    /// Judges pages in order with `pick_one`. A page winner becomes the
    /// leading candidate of the next page; a `next_page` keeps the previous
    /// winner.
    pub async fn run_sequential(
        &self,
        session: &LlmSession,
        query: &QueryView<'_>,
        buffer: &CandidateBuffer,
        proxies: &ProxyStore,
        experience: &ExperienceLibrary,
    ) -> Result<DeliberationResult, DeliberationError> {
        let pages = buffer.pages(self.config.stages);
        let of = pages.len();
        let mut leading: Option<ImageId> = None;
        let mut decisions = Vec::new();
        for (index, ids) in pages.iter().enumerate() {
            let mut shown: Vec<ImageId> = Vec::with_capacity(ids.len() + 1);
            if let Some(lead) = &leading {
                shown.push(lead.clone());
            }
            shown.extend(ids.iter().filter(|id| Some(*id) != leading.as_ref()).cloned());
            if shown.is_empty() {
                continue;
            }
            let page = Page {
                index,
                of,
                candidates: Self::with_proxies(&shown, proxies)?,
                leading: leading.as_ref(),
            };
            let decision = self
                .judge_page(session, query, &page, experience, PickMode::PickOne)
                .await?;
            if let Some(pick) = decision.selected.first() {
                leading = Some(pick.clone());
            }
            decisions.push(decision);
        }
        Ok(Self::finish(
            buffer,
            Strategy::Sequential,
            leading.into_iter().collect(),
            decisions,
        ))
    }

    /// Judges every page concurrently with `pick_many`; the union of picks is
    /// ordered by fused rank. Failed pages are skipped when at least one page
    /// succeeded.
    pub async fn run_parallel(
        &self,
        session: &LlmSession,
        query: &QueryView<'_>,
        buffer: &CandidateBuffer,
        proxies: &ProxyStore,
        experience: &ExperienceLibrary,
    ) -> Result<DeliberationResult, DeliberationError> {
        let pages = buffer.pages(self.config.stages);
        let of = pages.len();
        let mut prepared = Vec::new();
        for (index, ids) in pages.iter().enumerate() {
            if !ids.is_empty() {
                prepared.push(Page {
                    index,
                    of,
                    candidates: Self::with_proxies(ids, proxies)?,
                    leading: None,
                });
            }
        }
        let results = join_all(
            prepared
                .iter()
                .map(|page| self.judge_page(session, query, page, experience, PickMode::PickMany)),
        )
        .await;
        let mut decisions = Vec::new();
        let mut last_err = None;
        for r in results {
            match r {
                Ok(d) => decisions.push(d),
                Err(e) => {
                    warn!(query = query.query_id, error = %e, "page judgement failed");
                    last_err = Some(e);
                }
            }
        }
        if let Some(e) = last_err {
            if decisions.is_empty() {
                return Err(e);
            }
        }
        let position: HashMap<&ImageId, usize> = buffer
            .entries()
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id, i))
            .collect();
        let mut selected: Vec<ImageId> = decisions.iter().flat_map(|d| d.selected.iter().cloned()).collect();
        selected.sort_by_key(|id| position.get(id).copied().unwrap_or(usize::MAX));
        selected.dedup();
        Ok(Self::finish(buffer, Strategy::Parallel, selected, decisions))
    }

    pub async fn deliberate(
        &self,
        strategy: Strategy,
        session: &LlmSession,
        query: &QueryView<'_>,
        buffer: &CandidateBuffer,
        proxies: &ProxyStore,
        experience: &ExperienceLibrary,
    ) -> Result<DeliberationResult, DeliberationError> {
        if self.config.stages == 0 || buffer.is_empty() {
            return Ok(Self::finish(buffer, strategy, Vec::new(), Vec::new()));
        }
        match strategy {
            Strategy::Sequential => self.run_sequential(session, query, buffer, proxies, experience).await,
            Strategy::Parallel => self.run_parallel(session, query, buffer, proxies, experience).await,
        }
    }
}
