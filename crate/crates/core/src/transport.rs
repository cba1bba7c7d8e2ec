//! Shared blocking HTTP plumbing for the remote LLM and embedding backends.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

static REQUESTS_SENT: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests attempted by this process so far.
pub fn requests_sent() -> u64 {
    REQUESTS_SENT.load(Ordering::SeqCst)
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("request failed: {0}")]
    Unavailable(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("cannot decode response: {0}")]
    Decode(String),
}

pub(crate) fn client(timeout: Duration) -> Result<reqwest::blocking::Client, String> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| e.to_string())
}

/// Appends `suffix` to `base` unless the URL already ends with it.
pub(crate) fn endpoint_url(base: &str, suffix: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(suffix) {
        base.to_string()
    } else {
        format!("{base}/{suffix}")
    }
}

fn send_once<B: Serialize, R: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &B,
) -> Result<R, TransportError> {
    REQUESTS_SENT.fetch_add(1, Ordering::SeqCst);
    let mut request = client.post(url).json(body);
    if let Some(key) = api_key {
        request = request.bearer_auth(key);
    }
    let response = request.send().map_err(|e| {
        if e.is_timeout() {
            TransportError::Timeout
        } else {
            TransportError::Unavailable(e.to_string())
        }
    })?;
    let status = response.status();
    let text = response.text().map_err(|e| {
        if e.is_timeout() {
            TransportError::Timeout
        } else {
            TransportError::Unavailable(e.to_string())
        }
    })?;
    if !status.is_success() {
        return Err(TransportError::Status {
            status: status.as_u16(),
            body: text,
        });
    }
    serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
}

/// POSTs `body` as JSON, retrying once on timeout.
pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &B,
) -> Result<R, TransportError> {
    match send_once(client, url, api_key, body) {
        Err(TransportError::Timeout) => {
            tracing::warn!(url, "request timed out, retrying once");
            send_once(client, url, api_key, body)
        }
        other => other,
    }
}
