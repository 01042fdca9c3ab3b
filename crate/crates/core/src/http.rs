use serde_json::Value;

use crate::augment::BackendError;

/// POSTs `body` as JSON and returns the response text. 429, 5xx and
/// network failures are transient; other error statuses are permanent.
pub(crate) fn send_json(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    api_key: Option<&str>,
    body: &Value,
    timeout: std::time::Duration,
) -> Result<String, BackendError> {
    let mut request = client.post(endpoint).json(body).timeout(timeout);
    if let Some(key) = api_key {
        request = request.bearer_auth(key);
    }
    let response = request
        .send()
        .map_err(|e| BackendError::transient(format!("request failed: {e}")))?;
    let status = response.status();
    let text = response
        .text()
        .map_err(|e| BackendError::transient(format!("reading response: {e}")))?;
    if status.is_success() {
        Ok(text)
    } else if status.as_u16() == 429 || status.is_server_error() {
        Err(BackendError::transient(format!("HTTP {status}: {text}")))
    } else {
        Err(BackendError::permanent(format!("HTTP {status}: {text}")))
    }
}
