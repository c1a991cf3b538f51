//! Retrieve step: cached base embeddings, a trainable linear adapter, cosine
//! similarity and exact top-k search over a case bank view.

mod embed;

use std::sync::{Arc, RwLock};

use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bank::{BankView, Case, CaseId};

pub use embed::{EmbeddingBackend, HttpEmbedder, HttpEmbedderConfig, StubEmbedder};

/// Mining default for k; the deployed loop uses `DEFAULT_M`.
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_M: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding service unavailable: {0}")]
    EmbeddingServiceUnavailable(String),
    #[error("embedding dimension changed: configured {expected}, service returned {actual}")]
    DimensionChanged { expected: usize, actual: usize },
    #[error("vector dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding contains non-finite values")]
    NonFinite,
}

impl RetrievalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::EmbeddingServiceUnavailable(_))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Square linear map applied on top of frozen base embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub dimension: usize,
    /// Row-major `dimension × dimension`.
    pub matrix: Vec<f64>,
    pub trained_steps: u64,
}

impl Adapter {
    pub fn identity(dimension: usize) -> Self {
        let mut matrix = vec![0.0; dimension * dimension];
        for i in 0..dimension {
            matrix[i * dimension + i] = 1.0;
        }
        Self {
            dimension,
            matrix,
            trained_steps: 0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            matrix: self.matrix.iter().map(|x| x * factor).collect(),
            ..self.clone()
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dimension);
        self.matrix
            .chunks_exact(self.dimension)
            .map(|row| dot(row, x))
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.dimension).with_steps(self.trained_steps)
    }

    fn with_steps(mut self, steps: u64) -> Self {
        self.trained_steps = steps;
        self
    }
}

/// Base backend plus adapter, with a content-addressed cache of base vectors.
pub struct Embedder {
    backend: Box<dyn EmbeddingBackend>,
    adapter: RwLock<Arc<Adapter>>,
    cache: DashMap<[u8; 32], Arc<Vec<f64>>>,
}

impl Embedder {
    pub fn new(backend: Box<dyn EmbeddingBackend>) -> Self {
        let dimension = backend.dimension();
        Self {
            backend,
            adapter: RwLock::new(Arc::new(Adapter::identity(dimension))),
            cache: DashMap::new(),
        }
    }

    pub fn stub(dimension: usize, seed: u64) -> Self {
        Self::new(Box::new(StubEmbedder::new(dimension, seed)))
    }

    pub fn dimension(&self) -> usize {
        self.backend.dimension()
    }

    pub fn adapter(&self) -> Arc<Adapter> {
        Arc::clone(&self.adapter.read().expect("adapter lock poisoned"))
    }

    pub fn set_adapter(&self, adapter: Adapter) -> Result<(), RetrievalError> {
        if adapter.dimension != self.dimension() {
            return Err(RetrievalError::DimensionMismatch {
                left: adapter.dimension,
                right: self.dimension(),
            });
        }
        *self.adapter.write().expect("adapter lock poisoned") = Arc::new(adapter);
        Ok(())
    }

    pub fn clear_cache(&self) {
        self.cache.clear();
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    fn key(text: &str) -> [u8; 32] {
        Sha256::digest(text.as_bytes()).into()
    }

    fn validate(&self, v: &[f64]) -> Result<(), RetrievalError> {
        if v.len() != self.dimension() {
            return Err(RetrievalError::DimensionChanged {
                expected: self.dimension(),
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(())
    }

    /// Frozen base vector for `text`.
    pub fn raw(&self, text: &str) -> Result<Arc<Vec<f64>>, RetrievalError> {
        if text.is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let key = Self::key(text);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(Arc::clone(&hit));
        }
        let vector = self
            .backend
            .embed_batch(&[text])?
            .pop()
            .ok_or_else(|| RetrievalError::EmbeddingServiceUnavailable("empty response".into()))?;
        self.validate(&vector)?;
        let vector = Arc::new(vector);
        Ok(Arc::clone(
            &self.cache.entry(key).or_insert_with(|| vector),
        ))
    }

    /// Embed many texts, sending only cache misses to the backend in one batch.
    pub fn raw_many(&self, texts: &[&str]) -> Result<Vec<Arc<Vec<f64>>>, RetrievalError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(RetrievalError::EmptyText);
        }
        let mut misses: Vec<&str> = texts
            .iter()
            .copied()
            .filter(|t| !self.cache.contains_key(&Self::key(t)))
            .collect();
        misses.sort_unstable();
        misses.dedup();
        if !misses.is_empty() {
            let vectors = self.backend.embed_batch(&misses)?;
            if vectors.len() != misses.len() {
                return Err(RetrievalError::EmbeddingServiceUnavailable(format!(
                    "expected {} vectors, got {}",
                    misses.len(),
                    vectors.len()
                )));
            }
            for (text, v) in misses.iter().zip(vectors) {
                self.validate(&v)?;
                self.cache.entry(Self::key(text)).or_insert_with(|| Arc::new(v));
            }
        }
        texts.iter().map(|t| self.raw(t)).collect()
    }

    /// Base vector of a case: the stored embedding when present, else its intent.
    pub fn case_raw(&self, case: &Case) -> Result<Arc<Vec<f64>>, RetrievalError> {
        match &case.embedding {
            Some(e) => {
                self.validate(e)?;
                Ok(Arc::new(e.clone()))
            }
            None => self.raw(&case.intent),
        }
    }

    /// E_φ(text): base vector through the current adapter.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let raw = self.raw(text)?;
        Ok(self.adapter().apply(&raw))
    }
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("dimension", &self.dimension())
            .field("cached", &self.cache.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntry {
    pub case_id: CaseId,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievedEntry>,
    pub query_revision: u64,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &CaseId> {
        self.entries.iter().map(|e| &e.case_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Similarity descending, then case id ascending.
pub(crate) fn rank_order(a: &RetrievedEntry, b: &RetrievedEntry) -> std::cmp::Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.case_id.cmp(&b.case_id))
}

fn top_k(mut scored: Vec<RetrievedEntry>, k: usize) -> Vec<RetrievedEntry> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

/// Exact top-k by exhaustive scan. An empty view yields an empty result.
///
/// # Panics
/// If `k == 0`.
pub fn retrieve_top_k(
    view: &BankView<'_>,
    query: &str,
    k: usize,
    embedder: &Embedder,
) -> Result<RetrievalResult, RetrievalError> {
    assert!(k >= 1, "k must be at least 1");
    let adapter = embedder.adapter();
    let query_vec = adapter.apply(&embedder.raw(query)?);
    let mut scored = Vec::with_capacity(view.len());
    for case in view.iter() {
        let v = adapter.apply(&embedder.case_raw(case)?);
        scored.push(RetrievedEntry {
            case_id: case.id.clone(),
            similarity: cosine_similarity(&query_vec, &v)?,
        });
    }
    Ok(RetrievalResult {
        entries: top_k(scored, k),
        query_revision: view.revision(),
    })
}

/// Adapted vectors and their norms for every case of a view, built once for
/// repeated queries (mining, evaluation).
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    ids: Vec<CaseId>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    revision: u64,
}

impl RetrievalIndex {
    pub fn build(view: &BankView<'_>, embedder: &Embedder) -> Result<Self, RetrievalError> {
        let adapter = embedder.adapter();
        let missing: Vec<&str> = view
            .iter()
            .filter(|c| c.embedding.is_none())
            .map(|c| c.intent.as_str())
            .collect();
        embedder.raw_many(&missing)?;
        let mut ids = Vec::with_capacity(view.len());
        let mut vectors = Vec::with_capacity(view.len());
        let mut norms = Vec::with_capacity(view.len());
        for case in view.iter() {
            let v = adapter.apply(&embedder.case_raw(case)?);
            let n = norm(&v);
            if n == 0.0 {
                return Err(RetrievalError::ZeroVector);
            }
            ids.push(case.id.clone());
            vectors.push(v);
            norms.push(n);
        }
        Ok(Self {
            ids,
            vectors,
            norms,
            revision: view.revision(),
        })
    }

    /// Add a newly retained case; the index revision advances by one.
    pub fn push(&mut self, case: &Case, embedder: &Embedder) -> Result<(), RetrievalError> {
        let v = embedder.adapter().apply(&embedder.case_raw(case)?);
        let n = norm(&v);
        if n == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        self.ids.push(case.id.clone());
        self.vectors.push(v);
        self.norms.push(n);
        self.revision += 1;
        Ok(())
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Top-k against an adapted query vector, skipping `exclude`.
    pub fn top_k(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<&CaseId>,
    ) -> Result<RetrievalResult, RetrievalError> {
        assert!(k >= 1, "k must be at least 1");
        let query_norm = norm(query);
        if query_norm == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        // same operation order as `cosine_similarity`, so results are bit-identical
        let scored = self
            .ids
            .iter()
            .zip(self.vectors.iter().zip(&self.norms))
            .filter(|(id, _)| Some(*id) != exclude)
            .map(|(id, (v, n))| RetrievedEntry {
                case_id: id.clone(),
                similarity: (dot(query, v) / (query_norm * n)).clamp(-1.0, 1.0),
            })
            .collect();
        Ok(RetrievalResult {
            entries: top_k(scored, k),
            query_revision: self.revision,
        })
    }
}
