//! Reuse step: prompt assembly from retrieved cases and generation backends.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bank::Case;
use crate::metrics::ScriptScore;
use crate::script::{extract_functions, ScriptSource};

#[derive(Debug, Error)]
pub enum ReuseError {
    #[error("LLM service unavailable: {0}")]
    LlmServiceUnavailable(String),
    #[error("prompt of {chars} characters exceeds the budget of {budget}")]
    ContextOverflow { chars: usize, budget: usize },
    #[error("generator {0} needs a reference script")]
    MissingReference(&'static str),
}

impl ReuseError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::LlmServiceUnavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Sampling seed for stochastic mock backends.
    #[serde(default)]
    pub seed: u64,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCase {
    pub case: Case,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub intent: String,
    /// Highest similarity first.
    pub retrieved: Vec<RetrievedCase>,
    pub decoding: Decoding,
    /// Ground truth, visible only to the evaluation-time oracle backend.
    /// Never rendered into the prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl GenerationRequest {
    pub fn new(intent: impl Into<String>, retrieved: Vec<RetrievedCase>) -> Self {
        Self {
            intent: intent.into(),
            retrieved,
            decoding: Decoding::default(),
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request: GenerationRequest,
    pub draft: String,
    pub generator_id: String,
    pub latency_ms: u64,
    pub score: Option<ScriptScore>,
}

pub const PROMPT_PREAMBLE: &str = "You are a test engineer writing functional test scripts.\n\
Reuse the functions invoked in the reference cases below wherever they fit the new test intent.\n\
Do not invent functions that no reference case uses unless the intent requires it.\n\
Reply with the test script only.\n";

/// Render the prompt for a request. Byte-identical for identical requests.
///
/// ```text
/// <preamble>
/// ### Reference case 1 (similarity 0.8123)
/// Intent: <case intent>
/// ```python
/// <case script>
/// ```
/// ...
/// ### New test intent
/// <query intent>
/// ### Test script
/// ```
pub fn assemble_prompt(request: &GenerationRequest) -> String {
    let mut prompt = String::from(PROMPT_PREAMBLE);
    for (i, retrieved) in request.retrieved.iter().enumerate() {
        prompt.push_str(&format!(
            "\n### Reference case {} (similarity {:.4})\nIntent: {}\n```python\n{}\n```\n",
            i + 1,
            retrieved.similarity,
            retrieved.case.intent.trim(),
            retrieved.case.script.trim_end(),
        ));
    }
    prompt.push_str(&format!(
        "\n### New test intent\n{}\n\n### Test script\n",
        request.intent.trim()
    ));
    prompt
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &GenerationRequest, prompt: &str) -> Result<String, ReuseError>;
}

/// Returns the top retrieved case's script verbatim (or nothing).
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyTopCase;

impl Generator for CopyTopCase {
    fn id(&self) -> &str {
        "copy-top"
    }

    fn complete(&self, request: &GenerationRequest, _prompt: &str) -> Result<String, ReuseError> {
        Ok(request
            .retrieved
            .first()
            .map(|r| r.case.script.clone())
            .unwrap_or_default())
    }
}

/// Test-only upper bound: echoes the reference script.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn id(&self) -> &str {
        "oracle"
    }

    fn complete(&self, request: &GenerationRequest, _prompt: &str) -> Result<String, ReuseError> {
        request
            .reference
            .clone()
            .ok_or(ReuseError::MissingReference("oracle"))
    }
}

/// Keeps each call of the top case with probability `p_keep` and, with
/// probability `p_add`, appends one hallucinated call. Emits one call per
/// line. Randomness is seeded from the generator seed, the intent and
/// `decoding.seed`, so a request always yields the same draft.
#[derive(Debug, Clone)]
pub struct NoisyCopy {
    pub p_keep: f64,
    pub p_add: f64,
    pub seed: u64,
}

pub const HALLUCINATED_CALL: &str = "hallucinated.unknown_helper";

impl NoisyCopy {
    pub fn new(p_keep: f64, p_add: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&p_keep) && (0.0..=1.0).contains(&p_add));
        Self { p_keep, p_add, seed }
    }

    fn rng_for(&self, request: &GenerationRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(request.decoding.seed.to_le_bytes());
        hasher.update(request.intent.as_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }
}

impl Generator for NoisyCopy {
    fn id(&self) -> &str {
        "noisy"
    }

    fn complete(&self, request: &GenerationRequest, _prompt: &str) -> Result<String, ReuseError> {
        let mut rng = self.rng_for(request);
        let mut lines = Vec::new();
        if let Some(top) = request.retrieved.first() {
            for call in extract_functions(&ScriptSource::new(top.case.script.as_str())).iter() {
                if rng.random_bool(self.p_keep) {
                    lines.push(format!("{call}()"));
                }
            }
        }
        if rng.random_bool(self.p_add) {
            lines.push(format!("{HALLUCINATED_CALL}()"));
        }
        Ok(lines.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "test-script-generator".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout_ms: 60_000,
            max_retries: 3,
        }
    }
}

/// Chat-completions client. The request's decoding temperature is sent as-is.
pub struct LlmGenerator {
    config: LlmConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl LlmGenerator {
    pub fn new(config: LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { config, agent }
    }

    fn call_once(&self, request: &GenerationRequest, prompt: &str) -> Result<String, ReuseError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: request.decoding.temperature,
            max_tokens: request.decoding.max_tokens,
        };
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| ReuseError::LlmServiceUnavailable(e.to_string()))?;
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| ReuseError::LlmServiceUnavailable(format!("bad response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ReuseError::LlmServiceUnavailable("no choices in response".into()))
    }
}

impl Generator for LlmGenerator {
    fn id(&self) -> &str {
        "llm"
    }

    fn complete(&self, request: &GenerationRequest, prompt: &str) -> Result<String, ReuseError> {
        let mut attempt = 0;
        loop {
            match self.call_once(request, prompt) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.config.max_retries => {
                    tracing::debug!(attempt, error = %e, "LLM request failed, retrying");
                    std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Generator plus the context budget and overflow policy.
pub struct ReuseEngine {
    generator: Box<dyn Generator>,
    /// Prompt budget in characters; `None` disables the check.
    pub max_prompt_chars: Option<usize>,
}

impl ReuseEngine {
    pub fn new(generator: Box<dyn Generator>) -> Self {
        Self {
            generator,
            max_prompt_chars: None,
        }
    }

    pub fn with_budget(mut self, max_prompt_chars: usize) -> Self {
        self.max_prompt_chars = Some(max_prompt_chars);
        self
    }

    pub fn generator_id(&self) -> &str {
        self.generator.id()
    }

    /// Generate a draft. On context overflow the lowest-similarity case is
    /// dropped and the prompt rebuilt, down to a single case.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationRecord, ReuseError> {
        let start = Instant::now();
        let mut effective = request.clone();
        let prompt = loop {
            let prompt = assemble_prompt(&effective);
            let chars = prompt.chars().count();
            match self.max_prompt_chars {
                Some(budget) if chars > budget => {
                    if effective.retrieved.len() > 1 {
                        effective.retrieved.pop();
                        continue;
                    }
                    return Err(ReuseError::ContextOverflow { chars, budget });
                }
                _ => break prompt,
            }
        };
        let draft = self.generator.complete(&effective, &prompt)?;
        Ok(GenerationRecord {
            request: effective,
            draft,
            generator_id: self.generator.id().to_owned(),
            latency_ms: start.elapsed().as_millis() as u64,
            score: None,
        })
    }
}
