//! Base embedding backends: a deterministic offline stub and an HTTP client
//! for embeddings-compatible endpoints.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RetrievalError;

pub trait EmbeddingBackend: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

/// Hash-seeded random projection of token counts.
///
/// Each lowercase alphanumeric token owns a fixed Gaussian direction derived
/// from its SHA-256 digest; a text embeds as the count-weighted sum.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dimension: usize,
    seed: u64,
}

impl StubEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    fn token_direction(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let scale = 1.0 / (self.dimension as f64).sqrt();
        (0..self.dimension)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x * scale
            })
            .collect()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(lowered.as_str());
        }
        let mut out = vec![0.0; self.dimension];
        for token in tokens {
            for (o, d) in out.iter_mut().zip(self.token_direction(token)) {
                *o += d;
            }
        }
        out
    }
}

impl EmbeddingBackend for StubEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub dimension: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

/// Client for `POST {base_url}/embeddings` with `{model, input: [..]}`.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { config, agent }
    }

    fn request_once(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = EmbeddingRequest {
            model: &self.config.model,
            input: texts,
        };
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| RetrievalError::EmbeddingServiceUnavailable(e.to_string()))?;
        let parsed: EmbeddingResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| RetrievalError::EmbeddingServiceUnavailable(format!("bad response: {e}")))?;
        let mut data = parsed.data;
        if data.len() != texts.len() {
            return Err(RetrievalError::EmbeddingServiceUnavailable(format!(
                "expected {} vectors, got {}",
                texts.len(),
                data.len()
            )));
        }
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut attempt = 0;
        loop {
            match self.request_once(texts) {
                Ok(vectors) => return Ok(vectors),
                Err(e) if attempt < self.config.max_retries => {
                    tracing::debug!(attempt, error = %e, "embedding request failed, retrying");
                    std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
