//! Client contract for external generation, embedding and pair-classification
//! services, with deterministic local stand-ins.

mod fixture;
mod http;
mod mock;

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fixture::{ConstantEmbedder, FixtureEmbedder, hashed_unit_vector};
pub use http::{HttpClassifier, HttpEmbedder, HttpGenerator, HttpOptions};
pub use mock::{MockClassifier, MockGenerator, MockScript, token_overlap};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("failed to load backend script: {0}")]
    Script(String),
}

impl GatewayError {
    /// Connection problems, timeouts, 429 and 5xx.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::Timeout(_) => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Transport-class failures as opposed to configuration or input errors.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport(_)
                | GatewayError::Timeout(_)
                | GatewayError::Status { .. }
                | GatewayError::MalformedResponse(_)
        )
    }
}

/// A finite embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::MalformedResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::MalformedResponse(
                "embedding contains a non-finite value".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity clamped to [-1, 1]. Bitwise-equal vectors give exactly 1;
    /// a zero vector gives 0.
    pub fn cosine(&self, other: &Embedding) -> Result<f64, GatewayError> {
        if self.dim() != other.dim() {
            return Err(GatewayError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        if self.0 == other.0 && self.0.iter().any(|v| *v != 0.0) {
            return Ok(1.0);
        }
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (a, b) in self.0.iter().zip(&other.0) {
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub temperature: f64,
}

impl GenerationRequest {
    /// Greedy request with a newline stop, the evaluation default.
    pub fn greedy(prompt: impl Into<String>, max_new_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            stop_sequences: vec!["\n".into()],
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(with = "duration_micros")]
    pub latency: Duration,
    pub backend: String,
}

/// Truncates generated text at the earliest stop sequence.
pub fn apply_stop_sequences(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError>;
    fn descriptor(&self) -> String;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, GatewayError>;
    /// Provider dimension, when known ahead of the first call.
    fn dim(&self) -> Option<usize>;
}

/// Related-class probability for (a, b) sentence pairs.
pub trait PairClassifier: Send + Sync {
    fn classify(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, GatewayError>;
}

impl<T: Generator + ?Sized> Generator for std::sync::Arc<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        (**self).generate(request)
    }
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, GatewayError> {
        (**self).embed(texts)
    }
    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }
}

impl<T: PairClassifier + ?Sized> PairClassifier for std::sync::Arc<T> {
    fn classify(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, GatewayError> {
        (**self).classify(pairs)
    }
}

/// Embeds a single text.
pub fn embed_one(embedder: &dyn Embedder, text: &str) -> Result<Embedding, GatewayError> {
    embedder
        .embed(&[text])?
        .pop()
        .ok_or_else(|| GatewayError::MalformedResponse("no vector returned".into()))
}

/// Memoizes embeddings per exact text. Useful in front of remote embedders,
/// where the same knowledge-base questions are embedded for every query.
pub struct CachingEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Embedding>>,
}

impl<E: Embedder> CachingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<E: Embedder> Embedder for CachingEmbedder<E> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let missing: Vec<&str> = {
            let cache = self.cache.lock().unwrap();
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if !missing.is_empty() {
            let vectors = self.inner.embed(&missing)?;
            let mut cache = self.cache.lock().unwrap();
            for (t, v) in missing.into_iter().zip(vectors) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }

    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }
}

/// Retry with exponential backoff for retryable failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    #[serde(with = "duration_micros")]
    pub initial_backoff: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut backoff = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.attempts.max(1) => {
                    std::thread::sleep(backoff);
                    backoff = backoff.mul_f64(self.factor);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight backend calls.
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

pub struct InFlightPermit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        InFlightPermit(self)
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

pub(crate) mod duration_micros {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_micros() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_micros(u64::deserialize(d)?))
    }
}
