//! Uniform gateway to text-generation, vision-text, and embedding endpoints.
//!
//! Every model call in the pipeline flows through [`Gateway::complete`] or
//! [`Gateway::embed`]. The gateway owns the cross-cutting concerns so the
//! pipeline stages stay pure orchestration:
//!
//! * **Retries** — exponential backoff with jitter, applied only to
//!   transport-level failures and 5xx responses; content-level refusals are
//!   never retried (retrying would mask prompt bugs).
//! * **Content-addressed caching** — responses are stored immutably on disk,
//!   keyed by a digest of everything that determines the response. The
//!   exhaustive relevance sweep is O(queries × pages) model calls, so cheap
//!   resumability is not optional.
//! * **Concurrency limiting** — callers may fan out freely; the gateway
//!   admits at most a configured number of in-flight backend calls.
//!
//! Backends are pluggable: [`http::HttpBackend`] speaks the de-facto hosted
//! chat-completions protocol, and [`mock::MockBackend`] is a deterministic
//! offline stand-in driven by fixtures and a scripted fallback, which makes
//! the whole pipeline runnable and bit-reproducible with no network at all.

mod cache;
pub mod http;
pub mod mock;

pub use cache::ResponseCache;
pub use mock::tags;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// What a configured endpoint is capable of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    /// Text-only chat model.
    Llm,
    /// Vision-language model: accepts an optional image alongside the prompt.
    Vlm,
    /// Embedding model: texts in, fixed-dimension vectors out.
    Embedding,
}

/// Connection and sampling parameters for one model endpoint.
///
/// Model identities are configuration, not code: the pipeline only cares
/// about the endpoint's kind and limits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub base_url: String,
    pub model_name: String,
    pub kind: EndpointKind,
    /// Sampling temperature; 0 for the deterministic pipeline default.
    pub temperature: f64,
    pub max_tokens: u32,
    /// Additional attempts after the first, for retryable failures only.
    pub max_retries: u32,
    /// Per-attempt request timeout.
    pub timeout: Duration,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
}

impl EndpointSpec {
    /// A reasonable default spec for tests and mock-backed runs.
    pub fn mock(model_name: &str, kind: EndpointKind) -> Self {
        Self {
            base_url: String::new(),
            model_name: model_name.to_string(),
            kind,
            temperature: 0.0,
            max_tokens: 1024,
            max_retries: 2,
            timeout: Duration::from_secs(60),
            api_key_env: None,
        }
    }
}

/// One completion request.
#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub prompt: String,
    /// Raster image bytes (PNG or JPEG); only valid for `Vlm` endpoints.
    pub image: Option<Vec<u8>>,
    /// Pipeline stage name, recorded for audit and used by the mock backend
    /// to select its scripted behavior.
    pub request_tag: String,
}

impl ModelRequest {
    pub fn text(tag: &str, prompt: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), image: None, request_tag: tag.to_string() }
    }

    pub fn with_image(tag: &str, prompt: impl Into<String>, image: Vec<u8>) -> Self {
        Self { prompt: prompt.into(), image: Some(image), request_tag: tag.to_string() }
    }
}

/// A completed model response.
#[derive(Debug, Clone)]
pub struct ModelResponse {
    pub text: String,
    /// True when served from the on-disk cache without a backend call.
    pub cached: bool,
    pub latency: Duration,
    /// Backend attempts made for this response; 0 on a cache hit.
    pub attempt_count: u32,
}

/// Failure classification used by backends so the gateway knows what to retry.
#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Transport failures and 5xx responses — retryable.
    #[error("{0}")]
    Transient(String),
    /// Everything else (4xx, malformed responses, missing fixtures) — not
    /// retryable; retrying would just repeat the same deterministic failure.
    #[error("{0}")]
    Fatal(String),
}

/// Errors surfaced by the gateway.
#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("model request has an empty prompt (tag `{tag}`)")]
    EmptyPrompt { tag: String },

    #[error(
        "request `{tag}` carries an image but endpoint `{model}` is kind `{kind:?}`; \
         images require a vlm endpoint"
    )]
    ImageNotSupported { tag: String, model: String, kind: EndpointKind },

    #[error("endpoint `{model}` is kind `{kind:?}`, not an embedding endpoint")]
    NotEmbedding { model: String, kind: EndpointKind },

    #[error("`{model}` failed after {attempts} attempt(s): {message}")]
    Exhausted { model: String, attempts: u32, message: String },

    #[error("`{model}` returned an unusable response: {message}")]
    Protocol { model: String, message: String },

    #[error("response cache failure at {path}: {source}")]
    Cache {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A model backend: the transport-level implementation behind the gateway.
///
/// Implementations must be safe to call from many threads at once; the
/// gateway's in-flight limiter bounds the actual concurrency.
pub trait Backend: Send + Sync {
    /// Returns the raw response text for one prompt (plus optional image).
    fn complete(
        &self,
        endpoint: &EndpointSpec,
        request: &ModelRequest,
    ) -> Result<String, BackendError>;

    /// Returns one vector per input text.
    fn embed(&self, endpoint: &EndpointSpec, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
}

/// Counting semaphore for the in-flight limit (std has no bounded semaphore).
struct Semaphore {
    permits: Mutex<u32>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: u32) -> Self {
        Self { permits: Mutex::new(permits), available: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }

    fn release(&self) {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.available.notify_one();
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        self.semaphore.release();
    }
}

/// The gateway: retries + cache + concurrency limit over a [`Backend`].
pub struct Gateway {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: Semaphore,
    /// Base delay for the exponential backoff schedule.
    retry_base: Duration,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Gateway {
    /// Default number of concurrent in-flight backend calls.
    pub const DEFAULT_IN_FLIGHT: u32 = 8;

    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            limiter: Semaphore::new(Self::DEFAULT_IN_FLIGHT),
            retry_base: Duration::from_millis(250),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Enables the on-disk response cache rooted at `dir`.
    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Sets the in-flight limit (minimum 1).
    pub fn with_in_flight(mut self, limit: u32) -> Self {
        self.limiter = Semaphore::new(limit.max(1));
        self
    }

    /// Sets the backoff base delay (tests shrink this to keep retries fast).
    pub fn with_retry_base(mut self, base: Duration) -> Self {
        self.retry_base = base;
        self
    }

    /// Total backend invocations (every attempt counts, across threads).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    /// Total requests served from the cache without a backend call.
    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    /// Cache key for a completion: a digest over every field that can change
    /// the response. Any mutation of these yields a different key.
    fn completion_key(endpoint: &EndpointSpec, request: &ModelRequest) -> String {
        crate::digest::sha256_fields(&[
            endpoint.model_name.as_bytes(),
            request.prompt.as_bytes(),
            request.image.as_deref().unwrap_or(&[]),
            format_f64(endpoint.temperature).as_bytes(),
            endpoint.max_tokens.to_string().as_bytes(),
        ])
    }

    fn embedding_key(endpoint: &EndpointSpec, text: &str) -> String {
        crate::digest::sha256_fields(&[
            endpoint.model_name.as_bytes(),
            b"embedding",
            text.as_bytes(),
        ])
    }

    /// Executes one completion request with caching and retries.
    pub fn complete(
        &self,
        endpoint: &EndpointSpec,
        request: &ModelRequest,
    ) -> Result<ModelResponse, GateError> {
        if request.prompt.is_empty() {
            return Err(GateError::EmptyPrompt { tag: request.request_tag.clone() });
        }
        if request.image.is_some() && endpoint.kind != EndpointKind::Vlm {
            return Err(GateError::ImageNotSupported {
                tag: request.request_tag.clone(),
                model: endpoint.model_name.clone(),
                kind: endpoint.kind,
            });
        }

        let started = Instant::now();
        let key = Self::completion_key(endpoint, request);
        if let Some(cache) = &self.cache {
            if let Some(text) = cache.get_text(&key)? {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(ModelResponse {
                    text,
                    cached: true,
                    latency: started.elapsed(),
                    attempt_count: 0,
                });
            }
        }

        let (text, attempts) = self.call_with_retries(endpoint, |backend| {
            backend.complete(endpoint, request)
        })?;

        if let Some(cache) = &self.cache {
            cache.put_text(&key, &text)?;
        }
        Ok(ModelResponse {
            text,
            cached: false,
            latency: started.elapsed(),
            attempt_count: attempts,
        })
    }

    /// Embeds a batch of texts, one vector per text.
    ///
    /// Each text is cached individually; only cache misses reach the backend,
    /// as a single batched call.
    pub fn embed(
        &self,
        endpoint: &EndpointSpec,
        texts: &[String],
    ) -> Result<Vec<Vec<f32>>, GateError> {
        if endpoint.kind != EndpointKind::Embedding {
            return Err(GateError::NotEmbedding {
                model: endpoint.model_name.clone(),
                kind: endpoint.kind,
            });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }

        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut miss_indices: Vec<usize> = Vec::new();
        if let Some(cache) = &self.cache {
            for (i, text) in texts.iter().enumerate() {
                match cache.get_vector(&Self::embedding_key(endpoint, text))? {
                    Some(vector) => {
                        self.cache_hits.fetch_add(1, Ordering::Relaxed);
                        out[i] = Some(vector);
                    }
                    None => miss_indices.push(i),
                }
            }
        } else {
            miss_indices = (0..texts.len()).collect();
        }

        if !miss_indices.is_empty() {
            let miss_texts: Vec<String> =
                miss_indices.iter().map(|&i| texts[i].clone()).collect();
            let (vectors, _) = self.call_with_retries(endpoint, |backend| {
                backend.embed(endpoint, &miss_texts)
            })?;
            if vectors.len() != miss_texts.len() {
                return Err(GateError::Protocol {
                    model: endpoint.model_name.clone(),
                    message: format!(
                        "embedding batch returned {} vectors for {} texts",
                        vectors.len(),
                        miss_texts.len()
                    ),
                });
            }
            for (slot, vector) in miss_indices.iter().zip(vectors) {
                if let Some(cache) = &self.cache {
                    cache.put_vector(&Self::embedding_key(endpoint, &texts[*slot]), &vector)?;
                }
                out[*slot] = Some(vector);
            }
        }

        let vectors: Vec<Vec<f32>> = out.into_iter().map(|v| v.expect("all slots filled")).collect();
        let dim = vectors[0].len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
            return Err(GateError::Protocol {
                model: endpoint.model_name.clone(),
                message: format!(
                    "dimensionality mismatch across batch: expected {dim}, got {}",
                    bad.len()
                ),
            });
        }
        Ok(vectors)
    }

    /// Runs `call` under the in-flight limit with the retry schedule.
    ///
    /// Returns the successful value and the number of attempts made.
    fn call_with_retries<T>(
        &self,
        endpoint: &EndpointSpec,
        call: impl Fn(&dyn Backend) -> Result<T, BackendError>,
    ) -> Result<(T, u32), GateError> {
        let _permit = self.limiter.acquire();
        let max_attempts = endpoint.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match call(self.backend.as_ref()) {
                Ok(value) => return Ok((value, attempt)),
                Err(BackendError::Fatal(message)) => {
                    return Err(GateError::Exhausted {
                        model: endpoint.model_name.clone(),
                        attempts: attempt,
                        message,
                    });
                }
                Err(BackendError::Transient(message)) => {
                    if attempt >= max_attempts {
                        return Err(GateError::Exhausted {
                            model: endpoint.model_name.clone(),
                            attempts: attempt,
                            message,
                        });
                    }
                    std::thread::sleep(self.backoff_delay(attempt));
                }
            }
        }
    }

    /// Exponential backoff with full jitter: uniform over (0, base × 2^(n-1)].
    ///
    /// Jitter affects timing only, never artifact content, so it does not
    /// compromise run-to-run reproducibility of outputs.
    fn backoff_delay(&self, attempt: u32) -> Duration {
        let ceiling = self.retry_base.saturating_mul(1u32 << (attempt - 1).min(8));
        let nanos = ceiling.as_nanos().max(1) as u64;
        Duration::from_nanos(rand::rng().random_range(1..=nanos))
    }
}

/// Canonical text form of a float for digesting (shortest round-trip form).
fn format_f64(value: f64) -> String {
    let mut buf = value.to_string();
    if !buf.contains('.') && !buf.contains('e') {
        buf.push_str(".0");
    }
    buf
}
