use async_trait::async_trait;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{LlmProvider, LlmRequest, ProviderError, ProviderReply};

/// Client for chat-completion style endpoints.
#[derive(Debug, Clone)]
pub struct ChatCompletionProvider {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    name: String,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    completion_tokens: Option<u64>,
}

impl ChatCompletionProvider {
    /// `base_url` may be the API root or the full `/chat/completions` URL.
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>) -> Self {
        let base = base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let model = model.into();
        Self {
            client: reqwest::Client::new(),
            name: format!("chat:{model}"),
            endpoint,
            model,
            api_key,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn classify(status: StatusCode, body: String) -> ProviderError {
    let msg = format!(
        "HTTP {}: {}",
        status.as_u16(),
        body.chars().take(300).collect::<String>()
    );
    match status.as_u16() {
        401 | 403 => ProviderError::Auth(msg),
        408 => ProviderError::Timeout,
        429 => ProviderError::RateLimited(msg),
        500..=599 => ProviderError::Transient(msg),
        _ => ProviderError::Fatal(msg),
    }
}

#[async_trait]
impl LlmProvider for ChatCompletionProvider {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, req: &LlmRequest) -> Result<ProviderReply, ProviderError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        };
        let mut call = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Transient(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(classify(status, text));
        }
        let parsed: ChatResponse = resp
            .json()
            .await
            .map_err(|e| ProviderError::Fatal(format!("unreadable completion body: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(ProviderReply {
            text,
            tokens_out: parsed.usage.and_then(|u| u.completion_tokens),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_normalization() {
        let p = ChatCompletionProvider::new("http://h/v1/", "m", None);
        assert_eq!(p.endpoint(), "http://h/v1/chat/completions");
        let p = ChatCompletionProvider::new("http://h/v1/chat/completions", "m", None);
        assert_eq!(p.endpoint(), "http://h/v1/chat/completions");
    }

    #[test]
    fn status_classes() {
        assert!(matches!(
            classify(StatusCode::UNAUTHORIZED, "".into()),
            ProviderError::Auth(_)
        ));
        assert!(matches!(
            classify(StatusCode::TOO_MANY_REQUESTS, "".into()),
            ProviderError::RateLimited(_)
        ));
        assert!(matches!(
            classify(StatusCode::BAD_GATEWAY, "".into()),
            ProviderError::Transient(_)
        ));
        assert!(matches!(
            classify(StatusCode::BAD_REQUEST, "".into()),
            ProviderError::Fatal(_)
        ));
    }
}
