//! Training-free composed image retrieval.
//!
//! A query is a reference image plus a modification text. Three perception
//! workers rank the gallery from complementary views, an intent router weights
//! those views, weighted reciprocal-rank fusion builds a top-K candidate
//! buffer, and a page-wise tournament of LLM judgements re-ranks the buffer,
//! guided by a distilled library of reasoning heuristics.

pub mod config;
pub mod deliberation;
pub mod domain;
pub mod embedder;
pub mod embedstore;
pub mod evalbench;
pub mod experience;
pub mod llm;
pub mod perception;
pub mod pipeline;
pub mod prompts;
pub mod proxies;
pub mod router;
