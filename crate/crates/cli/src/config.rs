//! Flat `key = value` configuration with environment overrides.
//!
//! A key such as `retrieval.m` is overridden by the variable `CBR_RETRIEVAL_M`.
//! Lines starting with `#` are comments.

use std::path::{Path, PathBuf};

use cbr_core::retrieval::{Embedder, HttpEmbedder, HttpEmbedderConfig, DEFAULT_K, DEFAULT_M};
use cbr_core::reuse::{CopyTopCase, Generator, LlmConfig, LlmGenerator, NoisyCopy, OracleGenerator, ReuseEngine};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid value `{value}` for `{key}`: {message}")]
    InvalidValue { key: String, value: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    CopyTop,
    Noisy,
    Oracle,
    Llm,
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy-top" => Ok(Self::CopyTop),
            "noisy" => Ok(Self::Noisy),
            "oracle" => Ok(Self::Oracle),
            "llm" => Ok(Self::Llm),
            other => Err(format!("expected copy-top, noisy, oracle or llm, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub retrieval_m: usize,
    pub retrieval_k: usize,
    pub infonce_tau: f64,
    pub rl_beta: f64,
    pub llm_backend: GeneratorKind,
    pub llm: LlmConfig,
    pub llm_max_prompt_chars: Option<usize>,
    pub llm_noisy_keep: f64,
    pub llm_noisy_add: f64,
    pub llm_seed: u64,
    pub embedding_backend: EmbeddingKind,
    pub embedding_dimension: usize,
    pub embedding_seed: u64,
    pub embedding_base_url: String,
    pub embedding_model: String,
    pub embedding_timeout_ms: u64,
    pub embedding_adapter: Option<PathBuf>,
    pub server_host: String,
    pub server_port: u16,
    pub bank_path: PathBuf,
    pub journal_path: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            retrieval_m: DEFAULT_M,
            retrieval_k: DEFAULT_K,
            infonce_tau: 1.0,
            rl_beta: 0.1,
            llm_backend: GeneratorKind::CopyTop,
            llm: LlmConfig::default(),
            llm_max_prompt_chars: None,
            llm_noisy_keep: 0.8,
            llm_noisy_add: 0.2,
            llm_seed: 0,
            embedding_backend: EmbeddingKind::Stub,
            embedding_dimension: 64,
            embedding_seed: 0,
            embedding_base_url: "http://127.0.0.1:8001/v1".into(),
            embedding_model: "text-embedding".into(),
            embedding_timeout_ms: 30_000,
            embedding_adapter: None,
            server_host: "127.0.0.1".into(),
            server_port: 8080,
            bank_path: PathBuf::from("cases.jsonl"),
            journal_path: None,
        }
    }
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "retrieval.m",
    "retrieval.k",
    "infonce.tau",
    "rl.beta",
    "llm.backend",
    "llm.base_url",
    "llm.model",
    "llm.temperature",
    "llm.max_tokens",
    "llm.timeout_ms",
    "llm.max_retries",
    "llm.max_prompt_chars",
    "llm.noisy_keep",
    "llm.noisy_add",
    "llm.seed",
    "embedding.backend",
    "embedding.dimension",
    "embedding.seed",
    "embedding.base_url",
    "embedding.model",
    "embedding.timeout_ms",
    "embedding.adapter",
    "server.host",
    "server.port",
    "bank.path",
    "journal.path",
];

pub fn env_var_for(key: &str) -> String {
    format!("CBR_{}", key.replace('.', "_").to_ascii_uppercase())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

impl Settings {
    /// Defaults, then `file` (if any), then `CBR_*` variables from the process
    /// environment.
    pub fn load(file: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match file {
            Some(path) => Some(std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?),
            None => None,
        };
        Self::from_sources(text.as_deref(), std::env::vars())
    }

    pub fn from_sources(
        file: Option<&str>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut settings = Self::default();
        if let Some(text) = file {
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
                settings.set(key.trim(), value.trim())?;
            }
        }
        let env: Vec<(String, String)> = env.into_iter().collect();
        for key in KEYS {
            let var = env_var_for(key);
            if let Some((_, value)) = env.iter().rev().find(|(k, _)| *k == var) {
                settings.set(key, value.trim())?;
            }
        }
        settings.validate()?;
        Ok(settings)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let optional_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "retrieval.m" => self.retrieval_m = parse(key, value)?,
            "retrieval.k" => self.retrieval_k = parse(key, value)?,
            "infonce.tau" => self.infonce_tau = parse(key, value)?,
            "rl.beta" => self.rl_beta = parse(key, value)?,
            "llm.backend" => self.llm_backend = parse(key, value)?,
            "llm.base_url" => self.llm.base_url = value.into(),
            "llm.model" => self.llm.model = value.into(),
            "llm.temperature" => self.llm.temperature = parse(key, value)?,
            "llm.max_tokens" => self.llm.max_tokens = parse(key, value)?,
            "llm.timeout_ms" => self.llm.timeout_ms = parse(key, value)?,
            "llm.max_retries" => self.llm.max_retries = parse(key, value)?,
            "llm.max_prompt_chars" => {
                self.llm_max_prompt_chars = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            "llm.noisy_keep" => self.llm_noisy_keep = parse(key, value)?,
            "llm.noisy_add" => self.llm_noisy_add = parse(key, value)?,
            "llm.seed" => self.llm_seed = parse(key, value)?,
            "embedding.backend" => {
                self.embedding_backend = match value {
                    "stub" => EmbeddingKind::Stub,
                    "http" => EmbeddingKind::Http,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: value.into(),
                            message: "expected stub or http".into(),
                        })
                    }
                }
            }
            "embedding.dimension" => self.embedding_dimension = parse(key, value)?,
            "embedding.seed" => self.embedding_seed = parse(key, value)?,
            "embedding.base_url" => self.embedding_base_url = value.into(),
            "embedding.model" => self.embedding_model = value.into(),
            "embedding.timeout_ms" => self.embedding_timeout_ms = parse(key, value)?,
            "embedding.adapter" => self.embedding_adapter = optional_path(value),
            "server.host" => self.server_host = value.into(),
            "server.port" => self.server_port = parse(key, value)?,
            "bank.path" => self.bank_path = PathBuf::from(value),
            "journal.path" => self.journal_path = optional_path(value),
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, value: String, message: &str| {
            Err(ConfigError::InvalidValue {
                key: key.into(),
                value,
                message: message.into(),
            })
        };
        if self.retrieval_m == 0 {
            return invalid("retrieval.m", "0".into(), "must be positive");
        }
        if self.retrieval_k == 0 {
            return invalid("retrieval.k", "0".into(), "must be positive");
        }
        if !(self.infonce_tau > 0.0) {
            return invalid("infonce.tau", self.infonce_tau.to_string(), "must be positive");
        }
        if !(self.rl_beta >= 0.0) {
            return invalid("rl.beta", self.rl_beta.to_string(), "must be non-negative");
        }
        if self.embedding_dimension == 0 {
            return invalid("embedding.dimension", "0".into(), "must be positive");
        }
        for (key, p) in [("llm.noisy_keep", self.llm_noisy_keep), ("llm.noisy_add", self.llm_noisy_add)] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(key, p.to_string(), "must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn journal_path(&self) -> PathBuf {
        self.journal_path.clone().unwrap_or_else(|| {
            let mut name = self.bank_path.as_os_str().to_owned();
            name.push(".sessions");
            PathBuf::from(name)
        })
    }

    pub fn generator(&self) -> Box<dyn Generator> {
        match self.llm_backend {
            GeneratorKind::CopyTop => Box::new(CopyTopCase),
            GeneratorKind::Noisy => Box::new(NoisyCopy::new(self.llm_noisy_keep, self.llm_noisy_add, self.llm_seed)),
            GeneratorKind::Oracle => Box::new(OracleGenerator),
            GeneratorKind::Llm => Box::new(LlmGenerator::new(self.llm.clone())),
        }
    }

    pub fn engine(&self) -> ReuseEngine {
        let engine = ReuseEngine::new(self.generator());
        match self.llm_max_prompt_chars {
            Some(budget) => engine.with_budget(budget),
            None => engine,
        }
    }

    /// Embedder for the configured backend, with the adapter loaded when one
    /// is configured.
    pub fn embedder(&self) -> anyhow::Result<Embedder> {
        let embedder = match self.embedding_backend {
            EmbeddingKind::Stub => Embedder::stub(self.embedding_dimension, self.embedding_seed),
            EmbeddingKind::Http => Embedder::new(Box::new(HttpEmbedder::new(HttpEmbedderConfig {
                base_url: self.embedding_base_url.clone(),
                model: self.embedding_model.clone(),
                dimension: self.embedding_dimension,
                timeout_ms: self.embedding_timeout_ms,
                max_retries: 3,
            }))),
        };
        if let Some(path) = &self.embedding_adapter {
            let adapter = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            embedder.set_adapter(adapter)?;
        }
        Ok(embedder)
    }
}
