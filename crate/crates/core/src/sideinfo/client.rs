//! Chat-completion clients.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::http::{self, RetryPolicy};

pub const API_KEY_ENV: &str = "ZSRE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChatError {
    #[error("chat service error (status {status:?}): {body}")]
    Service { status: Option<u16>, body: String },
    #[error("offline mode: chat completion requests are disabled")]
    Offline,
}

pub trait ChatClient: Send + Sync {
    /// Returns the raw text of the first choice.
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError>;
}

/// OpenAI-compatible `POST {base}/v1/chat/completions`.
pub struct HttpChatClient {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpChatClient {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        Self {
            url: http::join_url(base_url, "v1/chat/completions"),
            api_key,
            agent: http::agent(timeout),
            retry,
        }
    }

    /// Reads the key from `ZSRE_LLM_API_KEY`.
    pub fn from_env(base_url: &str, timeout: Duration, retry: RetryPolicy) -> Self {
        Self::new(base_url, std::env::var(API_KEY_ENV).ok(), timeout, retry)
    }
}

fn first_choice(reply: &Value) -> Option<String> {
    reply
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let body = serde_json::to_value(request).expect("chat request serializes");
        let reply = http::post_json(&self.agent, &self.url, self.api_key.as_deref(), &body, &self.retry).map_err(
            |f| ChatError::Service {
                status: f.status,
                body: f.body,
            },
        )?;
        first_choice(&reply).ok_or_else(|| ChatError::Service {
            status: Some(200),
            body: format!("response has no choices[0].message.content: {reply}"),
        })
    }
}

/// Refuses every request; used under `--offline`.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineChatClient;

impl ChatClient for OfflineChatClient {
    fn complete(&self, _request: &ChatRequest) -> Result<String, ChatError> {
        Err(ChatError::Offline)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn reads_first_choice() {
        let reply = json!({"choices": [{"message": {"role": "assistant", "content": "banking institution"}}]});
        assert_eq!(first_choice(&reply).as_deref(), Some("banking institution"));
        assert_eq!(first_choice(&json!({"choices": []})), None);
    }

    #[test]
    fn request_wire_shape() {
        let req = ChatRequest {
            model: "gpt-4o-mini".into(),
            messages: vec![ChatMessage::user("hi")],
            temperature: 0.0,
            max_tokens: 64,
        };
        assert_eq!(
            serde_json::to_value(&req).unwrap(),
            json!({"model": "gpt-4o-mini", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0, "max_tokens": 64})
        );
    }
}
