//! HTTP encoder client: `POST {base}/embed` with `{model, pooling, texts}`,
//! expecting `{vectors: [[..], ..]}` back.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{EmbeddingError, EncoderConfig, EncoderProvider, Pooling, Result};
use crate::http::{self, RetryPolicy};

pub struct HttpEncoder {
    url: String,
    model_id: String,
    pooling: Pooling,
    dim: usize,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl HttpEncoder {
    pub fn new(base_url: impl AsRef<str>, cfg: &EncoderConfig) -> Self {
        Self {
            url: http::join_url(base_url.as_ref(), "embed"),
            model_id: cfg.model_id.clone(),
            pooling: cfg.pooling,
            dim: cfg.dim,
            agent: http::agent(Duration::from_secs(cfg.timeout_secs)),
            retry: RetryPolicy {
                max_retries: cfg.max_retries,
                ..RetryPolicy::default()
            },
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl EncoderProvider for HttpEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({
            "model": self.model_id,
            "pooling": self.pooling.as_str(),
            "texts": texts,
        });
        let reply = http::post_json(&self.agent, &self.url, None, &body, &self.retry).map_err(|f| {
            EmbeddingError::ServiceError {
                status: f.status,
                body: f.body,
            }
        })?;
        let parsed: EmbedResponse = serde_json::from_value(reply).map_err(|e| EmbeddingError::ServiceError {
            status: Some(200),
            body: format!("malformed /embed response: {e}"),
        })?;
        Ok(parsed.vectors)
    }
}
