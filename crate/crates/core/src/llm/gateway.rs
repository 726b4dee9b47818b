use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tokio::sync::Semaphore;
use tracing::{debug, warn};

use super::{
    parse_structured, whitespace_tokens, LlmError, LlmProvider, LlmReply, LlmRequest, MalformedStructuredReply,
    ProviderError, Role, SchemaKind, Structured,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt; `retries + 1` attempts in total.
    pub retries: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_backoff
            .checked_mul(factor)
            .unwrap_or(self.max_backoff)
            .min(self.max_backoff)
    }
}

/// Role-routed, bounded, retrying front door for every LLM call.
pub struct Gateway {
    providers: HashMap<Role, Arc<dyn LlmProvider>>,
    fallback: Option<Arc<dyn LlmProvider>>,
    permits: Arc<Semaphore>,
    bound: usize,
    retry: RetryPolicy,
    timeout: Duration,
}

pub struct GatewayBuilder {
    providers: HashMap<Role, Arc<dyn LlmProvider>>,
    fallback: Option<Arc<dyn LlmProvider>>,
    bound: usize,
    retry: RetryPolicy,
    timeout: Duration,
}

impl GatewayBuilder {
    pub fn provider(mut self, role: Role, provider: Arc<dyn LlmProvider>) -> Self {
        self.providers.insert(role, provider);
        self
    }

    /// Used for every role without a dedicated provider.
    pub fn fallback(mut self, provider: Arc<dyn LlmProvider>) -> Self {
        self.fallback = Some(provider);
        self
    }

    pub fn concurrency_bound(mut self, bound: usize) -> Self {
        self.bound = bound.max(1);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            providers: self.providers,
            fallback: self.fallback,
            permits: Arc::new(Semaphore::new(self.bound)),
            bound: self.bound,
            retry: self.retry,
            timeout: self.timeout,
        }
    }
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder {
            providers: HashMap::new(),
            fallback: None,
            bound: 8,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn concurrency_bound(&self) -> usize {
        self.bound
    }

    fn provider_for(&self, role: Role) -> Option<&Arc<dyn LlmProvider>> {
        self.providers.get(&role).or(self.fallback.as_ref())
    }

    /// Sends one request. A permit is held only while a provider call is in
    /// flight, never across a backoff sleep.
    pub async fn complete(&self, req: &LlmRequest) -> Result<LlmReply, LlmError> {
        req.validate()?;
        let provider = self.provider_for(req.role).ok_or(LlmError::NoProvider(req.role))?;
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.permits.acquire().await.expect("gateway semaphore is never closed");
                match tokio::time::timeout(self.timeout, provider.complete(req)).await {
                    Ok(result) => result,
                    Err(_) => Err(ProviderError::Timeout),
                }
            };
            match outcome {
                Ok(reply) => {
                    let tokens_out = reply.tokens_out.unwrap_or_else(|| whitespace_tokens(&reply.text));
                    debug!(role = %req.role, attempt, tokens_out, "llm reply");
                    return Ok(LlmReply {
                        text: reply.text,
                        tokens_out,
                        provider: provider.name().to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts: attempt,
                    });
                }
                Err(ProviderError::Auth(message)) => {
                    return Err(LlmError::Auth {
                        role: req.role,
                        message,
                    })
                }
                Err(ProviderError::Fatal(message)) => {
                    return Err(LlmError::Fatal {
                        role: req.role,
                        message,
                    })
                }
                Err(err) if attempt > self.retry.retries => {
                    return Err(match err {
                        ProviderError::Timeout => LlmError::Timeout {
                            role: req.role,
                            attempts: attempt,
                        },
                        other => LlmError::Exhausted {
                            role: req.role,
                            attempts: attempt,
                            last: other.to_string(),
                        },
                    });
                }
                Err(err) => {
                    let wait = self.retry.backoff(attempt - 1);
                    warn!(role = %req.role, attempt, error = %err, ?wait, "retrying llm call");
                    tokio::time::sleep(wait).await;
                }
            }
        }
    }
}

/// Result of [`LlmSession::complete_structured`].
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOutcome {
    pub value: Result<Structured, MalformedStructuredReply>,
    /// Replies that failed to parse (0, 1 or 2).
    pub malformed: u32,
    /// Output tokens over every reply, re-prompt included.
    pub tokens_out: u64,
}

/// Prompt for a second attempt after a malformed reply.
pub fn reprompt(prompt: &str, err: &MalformedStructuredReply) -> String {
    format!(
        "{prompt}\n\nYour previous reply could not be used ({}):\n{}\nReply again with the JSON object only.",
        err.reason, err.raw
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub role: Role,
    pub tokens_out: u64,
}

/// A gateway handle that records the output tokens of every reply it sees.
#[derive(Clone)]
pub struct LlmSession {
    gateway: Arc<Gateway>,
    records: Arc<Mutex<Vec<TokenRecord>>>,
}

impl LlmSession {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self {
            gateway,
            records: Arc::default(),
        }
    }

    /// Same gateway, fresh token tally.
    pub fn fork(&self) -> Self {
        Self::new(Arc::clone(&self.gateway))
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub async fn complete(&self, req: &LlmRequest) -> Result<LlmReply, LlmError> {
        let reply = self.gateway.complete(req).await?;
        self.records.lock().unwrap().push(TokenRecord {
            role: req.role,
            tokens_out: reply.tokens_out,
        });
        Ok(reply)
    }

    /// Sends a structured request; on an unparseable reply, re-prompts once
    /// with the raw reply attached. Provider errors are returned as-is.
    pub async fn complete_structured(&self, req: &LlmRequest, kind: SchemaKind) -> Result<StructuredOutcome, LlmError> {
        let mut req = req.clone();
        req.structured = true;
        let first = self.complete(&req).await?;
        let err = match parse_structured(&first.text, kind) {
            Ok(value) => {
                return Ok(StructuredOutcome {
                    value: Ok(value),
                    malformed: 0,
                    tokens_out: first.tokens_out,
                })
            }
            Err(e) => e,
        };
        let retry = LlmRequest {
            prompt: reprompt(&req.prompt, &err),
            ..req
        };
        let second = self.complete(&retry).await?;
        let tokens_out = first.tokens_out + second.tokens_out;
        Ok(match parse_structured(&second.text, kind) {
            Ok(value) => StructuredOutcome {
                value: Ok(value),
                malformed: 1,
                tokens_out,
            },
            Err(e) => StructuredOutcome {
                value: Err(e),
                malformed: 2,
                tokens_out,
            },
        })
    }

    pub fn records(&self) -> Vec<TokenRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn tokens_out(&self) -> u64 {
        self.records.lock().unwrap().iter().map(|r| r.tokens_out).sum()
    }
}
