//! HTTP backend speaking the de-facto hosted-model JSON protocol.
//!
//! Completions go to `{base_url}/chat/completions` with a message list;
//! images ride inline as base64 data URIs, so vision-language endpoints plug
//! in unmodified. Embeddings go to `{base_url}/embeddings`. Credentials come
//! from the environment (never from config files): each endpoint names the
//! variable holding its bearer token, defaulting to `RAGBENCH_API_KEY`.
//!
//! The backend classifies failures for the gateway's retry policy: transport
//! failures and 5xx responses are transient, everything else (4xx, malformed
//! bodies) is fatal — retrying a deterministic rejection only hides bugs.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use serde::Deserialize;

use super::{Backend, BackendError, EndpointSpec, ModelRequest};

/// Environment variable consulted when an endpoint does not name its own.
pub const DEFAULT_API_KEY_ENV: &str = "RAGBENCH_API_KEY";

/// HTTP(S) backend with one pooled agent per distinct timeout.
#[derive(Debug, Default)]
pub struct HttpBackend {
    agents: Mutex<BTreeMap<u128, ureq::Agent>>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

impl HttpBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn agent(&self, timeout: Duration) -> ureq::Agent {
        let mut agents = self.agents.lock().expect("agent cache poisoned");
        agents
            .entry(timeout.as_nanos())
            .or_insert_with(|| {
                ureq::Agent::config_builder()
                    .timeout_global(Some(timeout))
                    .build()
                    .into()
            })
            .clone()
    }

    fn url(endpoint: &EndpointSpec, path: &str) -> String {
        format!("{}/{path}", endpoint.base_url.trim_end_matches('/'))
    }

    fn api_key(endpoint: &EndpointSpec) -> Option<String> {
        let var = endpoint.api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
        std::env::var(var).ok().filter(|key| !key.is_empty())
    }

    fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        endpoint: &EndpointSpec,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, BackendError> {
        let mut request = self.agent(endpoint.timeout).post(Self::url(endpoint, path));
        if let Some(key) = Self::api_key(endpoint) {
            request = request.header("authorization", format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(classify_error)?;
        response.body_mut().read_json::<T>().map_err(classify_error)
    }

    /// Builds the message list for a completion, inlining any image.
    fn messages(request: &ModelRequest) -> serde_json::Value {
        match &request.image {
            None => serde_json::json!([{ "role": "user", "content": request.prompt }]),
            Some(image) => {
                let mime = if image.starts_with(&[0x89, b'P', b'N', b'G']) {
                    "image/png"
                } else {
                    "image/jpeg"
                };
                let encoded = base64::engine::general_purpose::STANDARD.encode(image);
                serde_json::json!([{
                    "role": "user",
                    "content": [
                        { "type": "text", "text": request.prompt },
                        {
                            "type": "image_url",
                            "image_url": { "url": format!("data:{mime};base64,{encoded}") }
                        }
                    ]
                }])
            }
        }
    }
}

/// Maps a wire-level failure onto the gateway's retry classification.
fn classify_error(error: ureq::Error) -> BackendError {
    match error {
        ureq::Error::StatusCode(code) if code >= 500 => {
            BackendError::Transient(format!("server error: HTTP {code}"))
        }
        ureq::Error::StatusCode(code) => BackendError::Fatal(format!("HTTP {code}")),
        ureq::Error::Timeout(reason) => BackendError::Transient(format!("timeout: {reason}")),
        ureq::Error::ConnectionFailed => BackendError::Transient("connection failed".into()),
        ureq::Error::HostNotFound => BackendError::Transient("host not found".into()),
        ureq::Error::Io(err) => BackendError::Transient(format!("io: {err}")),
        other => BackendError::Fatal(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn complete(
        &self,
        endpoint: &EndpointSpec,
        request: &ModelRequest,
    ) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": endpoint.model_name,
            "temperature": endpoint.temperature,
            "max_tokens": endpoint.max_tokens,
            "messages": Self::messages(request),
        });
        let parsed: ChatResponse = self.post_json(endpoint, "chat/completions", &body)?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Fatal("response carried no choices".into()))?;
        Ok(choice.message.content)
    }

    fn embed(&self, endpoint: &EndpointSpec, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let body = serde_json::json!({
            "model": endpoint.model_name,
            "input": texts,
        });
        let parsed: EmbeddingResponse = self.post_json(endpoint, "embeddings", &body)?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Fatal(format!(
                "embedding response carried {} vectors for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        let mut data = parsed.data;
        data.sort_by_key(|d| d.index);
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}
