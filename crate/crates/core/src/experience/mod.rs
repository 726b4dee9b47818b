//! Offline distillation of judging heuristics into a bounded library.
//!
//! Sandbox pages with known answers are judged several times, each attempt is
//! rewarded, and a distiller LLM contrasts the best and worst attempts to
//! propose heuristics. The library keeps the best of them.

mod distill;
mod library;
mod sandbox;

pub use distill::{
    distill, reward_rollout, rollout, run_distillation, set_f1, DistillConfig, DistillOutcome, RewardParts, Rollout,
    RoundLog,
};
pub use library::{
    normalized_key, CandidateExperience, ExperienceItem, ExperienceLibrary, DEFAULT_CAPACITY, MAX_ITEM_CHARS,
    SCORE_FLOOR,
};
pub use sandbox::{build_sandbox, hamming, AttributeTable, SandboxInstance, SandboxSource};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ImageId;
use crate::llm::LlmError;
use crate::prompts::PromptError;

/// Answer token for "nothing on this page is correct".
pub const NEXT_PAGE: &str = "NEXT_PAGE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    IntraPageTruth,
    CrossPageRejection,
    CounterfactualDefense,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [
        Paradigm::IntraPageTruth,
        Paradigm::CrossPageRejection,
        Paradigm::CounterfactualDefense,
    ];
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::IntraPageTruth => "intra_page_truth",
            Paradigm::CrossPageRejection => "cross_page_rejection",
            Paradigm::CounterfactualDefense => "counterfactual_defense",
        })
    }
}

/// One element of an answer set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum AnswerItem {
    Image(ImageId),
    NextPage,
}

impl From<String> for AnswerItem {
    fn from(s: String) -> Self {
        if s == NEXT_PAGE {
            return AnswerItem::NextPage;
        }
        match ImageId::new(s) {
            Ok(id) => AnswerItem::Image(id),
            Err(_) => AnswerItem::NextPage,
        }
    }
}

impl From<AnswerItem> for String {
    fn from(a: AnswerItem) -> Self {
        a.to_string()
    }
}

impl fmt::Display for AnswerItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerItem::Image(id) => f.write_str(id.as_str()),
            AnswerItem::NextPage => f.write_str(NEXT_PAGE),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperienceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a valid experience library: {reason}")]
    Format { path: String, reason: String },
    #[error("no query can supply a {paradigm} page of {page_size} candidates")]
    InsufficientCandidates { paradigm: Paradigm, page_size: usize },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("distillation aborted in round {round}: {reason}")]
    Aborted { round: usize, reason: String },
}

impl ExperienceError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperienceError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
