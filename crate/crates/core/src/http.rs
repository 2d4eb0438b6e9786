//! Blocking JSON-over-HTTP helper shared by the chat and encoder clients.

use std::thread;
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpFailure {
    /// `None` for transport-level failures (connect, timeout, bad body).
    pub status: Option<u16>,
    pub body: String,
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.status {
            Some(code) => write!(f, "HTTP {code}: {}", self.body),
            None => write!(f, "transport error: {}", self.body),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(20),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

fn retryable(failure: &HttpFailure) -> bool {
    match failure.status {
        None => true,
        Some(code) => code == 429 || code >= 500,
    }
}

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn post_once(agent: &ureq::Agent, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, HttpFailure> {
    let mut request = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = bearer {
        request = request.header("Authorization", format!("Bearer {key}"));
    }
    let transport = |e: ureq::Error| HttpFailure {
        status: None,
        body: e.to_string(),
    };
    let mut response = request.send_json(body).map_err(transport)?;
    let status = response.status().as_u16();
    let text = response.body_mut().read_to_string().map_err(transport)?;
    if !(200..300).contains(&status) {
        return Err(HttpFailure {
            status: Some(status),
            body: text,
        });
    }
    serde_json::from_str(&text).map_err(|e| HttpFailure {
        status: Some(status),
        body: format!("invalid JSON response ({e}): {text}"),
    })
}

/// POSTs `body` and parses a JSON reply, retrying transport errors, 429 and 5xx.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<Value, HttpFailure> {
    let mut attempt = 0;
    loop {
        match post_once(agent, url, bearer, body) {
            Ok(v) => return Ok(v),
            Err(failure) if retryable(&failure) && attempt < policy.max_retries => {
                let delay = policy.delay(attempt);
                log::debug!("POST {url} failed ({failure}); retry {} in {delay:?}", attempt + 1);
                thread::sleep(delay);
                attempt += 1;
            }
            Err(failure) => return Err(failure),
        }
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(500),
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(400));
        assert_eq!(p.delay(3), Duration::from_millis(500));
        assert_eq!(p.delay(40), Duration::from_millis(500));
    }

    #[test]
    fn url_joining() {
        assert_eq!(join_url("http://h:1/", "/v1/chat/completions"), "http://h:1/v1/chat/completions");
        assert_eq!(join_url("http://h:1", "embed"), "http://h:1/embed");
    }
}
