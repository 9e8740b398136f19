//! Chat-completions and embeddings adapters over an injectable JSON transport.

use std::fmt;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, EmbeddingBackend};

pub trait Transport: Send + Sync {
    /// POSTs `body` as JSON and returns the status code with the parsed reply.
    /// `Err` means the request never produced an HTTP response.
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> Result<(u16, Value), String>;
}

/// Blocking HTTPS transport. The client is built lazily on first use.
#[derive(Default)]
pub struct ReqwestTransport {
    client: OnceLock<reqwest::blocking::Client>,
}

impl ReqwestTransport {
    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("TLS backend available")
        })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> Result<(u16, Value), String> {
        let mut req = self.client().post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let value = resp.json::<Value>().unwrap_or(Value::Null);
        Ok((status, value))
    }
}

fn classify_status(status: u16, body: &Value) -> Result<(), BackendError> {
    match status {
        200..=299 => Ok(()),
        408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}"))),
        _ => Err(BackendError::Permanent(format!("HTTP {status}: {body}"))),
    }
}

pub struct HttpChatBackend {
    endpoint: String,
    model: String,
    max_tokens: u32,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
}

impl fmt::Debug for HttpChatBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpChatBackend {
    pub fn new(
        endpoint: String,
        model: String,
        max_tokens: u32,
        api_key: Option<String>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint,
            model,
            max_tokens,
            api_key,
            transport,
        }
    }
}

impl CompletionBackend for HttpChatBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        });
        let (status, reply) = self
            .transport
            .post_json(&self.endpoint, self.api_key.as_deref(), &body)
            .map_err(BackendError::Transient)?;
        classify_status(status, &reply)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| {
                BackendError::Permanent("reply has no choices[0].message.content".into())
            })
    }
}

pub struct HttpEmbeddingBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
}

impl HttpEmbeddingBackend {
    pub fn new(
        endpoint: String,
        model: String,
        api_key: Option<String>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint,
            model,
            api_key,
            transport,
        }
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, text: &str, dim: usize) -> Result<Vec<f32>, BackendError> {
        let body = json!({"model": self.model, "input": text, "dimensions": dim});
        let (status, reply) = self
            .transport
            .post_json(&self.endpoint, self.api_key.as_deref(), &body)
            .map_err(BackendError::Transient)?;
        classify_status(status, &reply)?;
        let values = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Permanent("reply has no data[0].embedding".into()))?;
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .map(|x| x as f32)
                    .ok_or_else(|| BackendError::Permanent("non-numeric embedding value".into()))
            })
            .collect()
    }
}
