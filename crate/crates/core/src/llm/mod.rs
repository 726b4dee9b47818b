//! Provider-agnostic LLM access.
//!
//! Every LLM call in the engine goes through a [`Gateway`]: one provider per
//! [`Role`], a global in-flight bound, retry with exponential backoff, and
//! per-query token accounting through [`LlmSession`].

mod gateway;
mod http;
mod mock;
mod structured;

pub use gateway::{reprompt, Gateway, GatewayBuilder, LlmSession, RetryPolicy, StructuredOutcome, TokenRecord};
pub use http::ChatCompletionProvider;
pub use mock::{stable_seed, MockProvider};
pub use structured::{extract_first_json, parse_structured, MalformedStructuredReply, SchemaKind, Structured};

use std::fmt;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Call sites that talk to an LLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SiWorker,
    CpWorker,
    IrRouter,
    DeJudge,
    Distiller,
    LogicJudge,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::SiWorker,
        Role::CpWorker,
        Role::IrRouter,
        Role::DeJudge,
        Role::Distiller,
        Role::LogicJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::SiWorker => "si_worker",
            Role::CpWorker => "cp_worker",
            Role::IrRouter => "ir_router",
            Role::DeJudge => "de_judge",
            Role::Distiller => "distiller",
            Role::LogicJudge => "logic_judge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub role: Role,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// The caller expects a JSON reply.
    pub structured: bool,
}

impl LlmRequest {
    pub fn new(role: Role, prompt: impl Into<String>) -> Self {
        Self {
            role,
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
            structured: false,
        }
    }

    pub fn structured(mut self) -> Self {
        self.structured = true;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmReply {
    pub text: String,
    pub tokens_out: u64,
    pub provider: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

/// What a provider hands back before the gateway adds bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    /// Completion tokens as reported by the provider, if any.
    pub tokens_out: Option<u64>,
}

impl ProviderReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tokens_out: None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("request timed out")]
    Timeout,
    #[error("{0}")]
    Fatal(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            ProviderError::Transient(_) | ProviderError::RateLimited(_) | ProviderError::Timeout
        )
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no provider configured for role {0}")]
    NoProvider(Role),
    #[error("{role}: retries exhausted after {attempts} attempts (last error: {last})")]
    Exhausted { role: Role, attempts: u32, last: String },
    #[error("{role}: authentication rejected: {message}")]
    Auth { role: Role, message: String },
    #[error("{role}: timed out after {attempts} attempts")]
    Timeout { role: Role, attempts: u32 },
    #[error("{role}: {message}")]
    Fatal { role: Role, message: String },
}

#[async_trait]
pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    async fn complete(&self, req: &LlmRequest) -> Result<ProviderReply, ProviderError>;
}

/// Token count used when a provider does not report usage.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
