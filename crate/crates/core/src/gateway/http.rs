use std::sync::OnceLock;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    apply_stop_sequences, Embedder, Embedding, GatewayError, GenerationRequest,
    GenerationResponse, Generator, InFlightLimit, PairClassifier, RetryPolicy,
};

#[derive(Debug, Clone)]
pub struct HttpOptions {
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    /// Passed through as `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
}

impl Default for HttpOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            bearer_token: None,
        }
    }
}

struct JsonEndpoint {
    base_url: String,
    client: Client,
    options: HttpOptions,
    limit: InFlightLimit,
}

impl JsonEndpoint {
    fn new(base_url: &str, options: HttpOptions) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(options.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
            limit: InFlightLimit::new(options.max_in_flight),
            options,
        })
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, GatewayError> {
        let url = format!("{}{}", self.base_url, path);
        self.options.retry.run(|| {
            let _permit = self.limit.acquire();
            let mut req = self.client.post(&url).json(body);
            if let Some(token) = &self.options.bearer_token {
                req = req.bearer_auth(token);
            }
            let resp = req.send().map_err(|e| self.classify(e))?;
            let status = resp.status();
            let bytes = resp.bytes().map_err(|e| self.classify(e))?;
            if status.as_u16() != 200 {
                return Err(GatewayError::Status {
                    status: status.as_u16(),
                    body: String::from_utf8_lossy(&bytes).into_owned(),
                });
            }
            serde_json::from_slice(&bytes).map_err(|e| GatewayError::MalformedResponse(e.to_string()))
        })
    }

    fn classify(&self, e: reqwest::Error) -> GatewayError {
        if e.is_timeout() {
            GatewayError::Timeout(self.options.timeout)
        } else {
            GatewayError::Transport(e.to_string())
        }
    }
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    max_new_tokens: usize,
    stop: &'a [String],
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

/// Client for `POST /generate`.
pub struct HttpGenerator {
    endpoint: JsonEndpoint,
}

impl HttpGenerator {
    pub fn new(base_url: &str, options: HttpOptions) -> Result<Self, GatewayError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url, options)?,
        })
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        request.validate()?;
        let body = GenerateBody {
            prompt: &request.prompt,
            max_new_tokens: request.max_new_tokens,
            stop: &request.stop_sequences,
            temperature: request.temperature,
        };
        let start = Instant::now();
        let reply: GenerateReply = self.endpoint.post("/generate", &body)?;
        Ok(GenerationResponse {
            text: apply_stop_sequences(&reply.text, &request.stop_sequences),
            latency: start.elapsed(),
            backend: self.descriptor(),
        })
    }

    fn descriptor(&self) -> String {
        format!("http:{}", self.endpoint.base_url)
    }
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedReply {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST /embed`. The dimension is fixed by the first response
/// unless configured up front.
pub struct HttpEmbedder {
    endpoint: JsonEndpoint,
    dim: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, options: HttpOptions, dim: Option<usize>) -> Result<Self, GatewayError> {
        let cell = OnceLock::new();
        if let Some(d) = dim {
            let _ = cell.set(d);
        }
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url, options)?,
            dim: cell,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let reply: EmbedReply = self.endpoint.post("/embed", &EmbedBody { texts })?;
        if reply.vectors.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                reply.vectors.len()
            )));
        }
        let mut out = Vec::with_capacity(texts.len());
        for v in reply.vectors {
            let expected = *self.dim.get_or_init(|| v.len());
            if v.len() != expected {
                return Err(GatewayError::DimensionMismatch {
                    expected,
                    got: v.len(),
                });
            }
            out.push(Embedding::new(v)?);
        }
        Ok(out)
    }

    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }
}

#[derive(Serialize)]
struct PairBody<'a> {
    a: &'a str,
    b: &'a str,
}

#[derive(Serialize)]
struct ClassifyBody<'a> {
    pairs: Vec<PairBody<'a>>,
}

#[derive(Deserialize)]
struct ClassifyReply {
    probabilities: Vec<f64>,
}

/// Client for `POST /classify`; the server joins each pair with its
/// separator token.
pub struct HttpClassifier {
    endpoint: JsonEndpoint,
}

impl HttpClassifier {
    pub fn new(base_url: &str, options: HttpOptions) -> Result<Self, GatewayError> {
        Ok(Self {
            endpoint: JsonEndpoint::new(base_url, options)?,
        })
    }
}

impl PairClassifier for HttpClassifier {
    fn classify(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, GatewayError> {
        let body = ClassifyBody {
            pairs: pairs.iter().map(|&(a, b)| PairBody { a, b }).collect(),
        };
        let reply: ClassifyReply = self.endpoint.post("/classify", &body)?;
        if reply.probabilities.len() != pairs.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {} probabilities, got {}",
                pairs.len(),
                reply.probabilities.len()
            )));
        }
        if let Some(p) = reply
            .probabilities
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(GatewayError::MalformedResponse(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(reply.probabilities)
    }
}
