//! Reranking-based pseudo-label mining and contrastive adapter training.
//!
//! For every case, the semantic top-k of the rest of the bank is reranked by
//! function F1 against the case's own script; the best becomes the positive
//! and the remainder the negatives. The adapter is then trained with InfoNCE
//! using gradients derived by hand through cosine similarity and the linear
//! map.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankView, CaseId};
use crate::metrics::function_f1;
use crate::retrieval::{norm, Adapter, Embedder, RetrievalError, RetrievalIndex};
use crate::script::{extract_functions, FunctionCallSet, ScriptSource};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("bank has {size} case(s); mining needs at least 2")]
    BankTooSmall { size: usize },
    #[error("no base embedding for case {0}")]
    MissingEmbedding(CaseId),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no triplets to train on")]
    NoTriplets,
    #[error("non-finite loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("triplet file line {line}: {message}")]
    MalformedTriplet { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTriplet {
    pub query_id: CaseId,
    pub positive_id: CaseId,
    /// Remaining top-k cases, in retrieval order.
    pub negative_ids: Vec<CaseId>,
    pub positive_ff1: f64,
}

/// Mine one triplet per case of `view` from its leave-one-out top-k.
pub fn mine_labels(
    view: &BankView<'_>,
    k: usize,
    embedder: &Embedder,
) -> Result<Vec<LabeledTriplet>, FinetuneError> {
    assert!(k >= 1, "k must be at least 1");
    if view.len() < 2 {
        return Err(FinetuneError::BankTooSmall { size: view.len() });
    }
    let index = RetrievalIndex::build(view, embedder)?;
    let adapter = embedder.adapter();
    let cases: Vec<_> = view.iter().collect();
    let calls: HashMap<&CaseId, FunctionCallSet> = cases
        .iter()
        .map(|c| (&c.id, extract_functions(&ScriptSource::new(c.script.as_str()))))
        .collect();

    cases
        .par_iter()
        .map(|case| {
            let query = adapter.apply(&embedder.case_raw(case)?);
            let result = index.top_k(&query, k, Some(&case.id))?;
            let own = &calls[&case.id];
            // first strict maximum: ties keep the higher-similarity, lower-id entry
            let mut best = 0;
            let mut best_ff1 = f64::NEG_INFINITY;
            for (i, entry) in result.entries.iter().enumerate() {
                let ff1 = function_f1(&calls[&entry.case_id], own);
                if ff1 > best_ff1 {
                    best = i;
                    best_ff1 = ff1;
                }
            }
            let positive_id = result.entries[best].case_id.clone();
            let negative_ids = result
                .entries
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != best)
                .map(|(_, e)| e.case_id.clone())
                .collect();
            Ok(LabeledTriplet {
                query_id: case.id.clone(),
                positive_id,
                negative_ids,
                positive_ff1: best_ff1,
            })
        })
        .collect()
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &[LabeledTriplet]) -> Result<(), FinetuneError> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut out, t).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<LabeledTriplet>, FinetuneError> {
    let reader = BufReader::new(File::open(path)?);
    let mut triplets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        triplets.push(serde_json::from_str(&line).map_err(|e| FinetuneError::MalformedTriplet {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(triplets)
}

/// −log softmax of the positive among {positive} ∪ negatives, at temperature τ,
/// with the derivative of the loss w.r.t. each similarity.
pub fn info_nce_term(positive: f64, negatives: &[f64], temperature: f64) -> (f64, f64, Vec<f64>) {
    let scaled_pos = positive / temperature;
    let max = negatives
        .iter()
        .map(|s| s / temperature)
        .fold(scaled_pos, f64::max);
    let exp_pos = (scaled_pos - max).exp();
    let exp_negs: Vec<f64> = negatives.iter().map(|s| (s / temperature - max).exp()).collect();
    let z = exp_pos + exp_negs.iter().sum::<f64>();
    let loss = (max + z.ln() - scaled_pos).max(0.0);
    let d_pos = (exp_pos / z - 1.0) / temperature;
    let d_negs = exp_negs.iter().map(|e| e / z / temperature).collect();
    (loss, d_pos, d_negs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoNceItem {
    pub query: CaseId,
    pub positive: CaseId,
    pub negatives: Vec<CaseId>,
}

impl From<&LabeledTriplet> for InfoNceItem {
    fn from(t: &LabeledTriplet) -> Self {
        Self {
            query: t.query_id.clone(),
            positive: t.positive_id.clone(),
            negatives: t.negative_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceBatch {
    pub items: Vec<InfoNceItem>,
    pub temperature: f64,
    pub in_batch_negatives: bool,
}

impl InfoNceBatch {
    /// Negative pool for item `i`: its mined negatives, plus the other items'
    /// positives when in-batch negatives are on. The item's own query and
    /// positive never appear as negatives, and duplicates are dropped.
    pub fn negative_pool(&self, i: usize) -> Vec<&CaseId> {
        let item = &self.items[i];
        let in_batch = self
            .items
            .iter()
            .enumerate()
            .filter(|(j, _)| self.in_batch_negatives && *j != i)
            .map(|(_, other)| &other.positive);
        let mut pool: Vec<&CaseId> = Vec::new();
        for id in item.negatives.iter().chain(in_batch) {
            if id != &item.query && id != &item.positive && !pool.contains(&id) {
                pool.push(id);
            }
        }
        pool
    }
}

/// Frozen base vectors keyed by case id.
pub type BaseEmbeddings = HashMap<CaseId, Vec<f64>>;

pub fn base_embeddings(view: &BankView<'_>, embedder: &Embedder) -> Result<BaseEmbeddings, FinetuneError> {
    let missing: Vec<&str> = view
        .iter()
        .filter(|c| c.embedding.is_none())
        .map(|c| c.intent.as_str())
        .collect();
    embedder.raw_many(&missing)?;
    view.iter()
        .map(|c| Ok((c.id.clone(), embedder.case_raw(c)?.as_ref().clone())))
        .collect()
}

struct Adapted<'e> {
    base: &'e [f64],
    vector: Vec<f64>,
    norm: f64,
    grad: Vec<f64>,
}

/// Adapted vectors for the cases touched by one batch, with per-vector
/// gradient accumulators.
struct Workspace<'e> {
    embeddings: &'e BaseEmbeddings,
    adapter: &'e Adapter,
    slots: HashMap<&'e CaseId, usize>,
    adapted: Vec<Adapted<'e>>,
}

impl<'e> Workspace<'e> {
    fn slot(&mut self, id: &CaseId) -> Result<usize, FinetuneError> {
        if let Some(&s) = self.slots.get(id) {
            return Ok(s);
        }
        let (key, base) = self
            .embeddings
            .get_key_value(id)
            .ok_or_else(|| FinetuneError::MissingEmbedding(id.clone()))?;
        let vector = self.adapter.apply(base);
        let n = norm(&vector);
        if n == 0.0 {
            return Err(RetrievalError::ZeroVector.into());
        }
        self.adapted.push(Adapted {
            base,
            grad: vec![0.0; vector.len()],
            vector,
            norm: n,
        });
        self.slots.insert(key, self.adapted.len() - 1);
        Ok(self.adapted.len() - 1)
    }

    fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (&self.adapted[a], &self.adapted[b]);
        x.vector.iter().zip(&y.vector).map(|(u, v)| u * v).sum::<f64>() / (x.norm * y.norm)
    }

    /// Push `upstream · ∂cos(u_a, u_b)/∂u` into both vectors' accumulators.
    fn backprop_cosine(&mut self, a: usize, b: usize, upstream: f64, s: f64) {
        if upstream == 0.0 {
            return;
        }
        let (na, nb) = (self.adapted[a].norm, self.adapted[b].norm);
        for i in 0..self.adapted[a].vector.len() {
            let ua = self.adapted[a].vector[i];
            let ub = self.adapted[b].vector[i];
            self.adapted[a].grad[i] += upstream * (ub / (na * nb) - s * ua / (na * na));
            self.adapted[b].grad[i] += upstream * (ua / (na * nb) - s * ub / (nb * nb));
        }
    }

    /// ∂/∂W of Σ_c g_c · (W x_c) = Σ_c g_c x_cᵀ.
    fn matrix_grad(&self, scale: f64) -> Vec<f64> {
        let d = self.adapter.dimension;
        let mut grad = vec![0.0; d * d];
        for a in &self.adapted {
            for (r, g_r) in a.grad.iter().enumerate() {
                if *g_r == 0.0 {
                    continue;
                }
                let row = &mut grad[r * d..(r + 1) * d];
                for (w, x) in row.iter_mut().zip(a.base) {
                    *w += g_r * x * scale;
                }
            }
        }
        grad
    }
}

/// Mean InfoNCE loss over the batch and its gradient w.r.t. the adapter
/// matrix (row-major, same layout as [`Adapter::matrix`]).
pub fn info_nce_loss_and_grad(
    batch: &InfoNceBatch,
    embeddings: &BaseEmbeddings,
    adapter: &Adapter,
) -> Result<(f64, Vec<f64>), FinetuneError> {
    if batch.items.is_empty() {
        return Err(FinetuneError::EmptyBatch);
    }
    if !(batch.temperature > 0.0) {
        return Err(FinetuneError::InvalidTemperature(batch.temperature));
    }
    let mut ws = Workspace {
        embeddings,
        adapter,
        slots: HashMap::new(),
        adapted: Vec::new(),
    };

    let mut total = 0.0;
    for (i, item) in batch.items.iter().enumerate() {
        let q = ws.slot(&item.query)?;
        let p = ws.slot(&item.positive)?;
        let negs = batch
            .negative_pool(i)
            .into_iter()
            .map(|id| ws.slot(id))
            .collect::<Result<Vec<_>, _>>()?;

        let s_pos = ws.cosine(q, p);
        let s_negs: Vec<f64> = negs.iter().map(|&n| ws.cosine(q, n)).collect();
        let (loss, d_pos, d_negs) = info_nce_term(s_pos, &s_negs, batch.temperature);
        total += loss;

        ws.backprop_cosine(q, p, d_pos, s_pos);
        for ((&n, &g), &s) in negs.iter().zip(&d_negs).zip(&s_negs) {
            ws.backprop_cosine(q, n, g, s);
        }
    }

    let count = batch.items.len() as f64;
    Ok((total / count, ws.matrix_grad(1.0 / count)))
}

pub fn info_nce_loss(
    batch: &InfoNceBatch,
    embeddings: &BaseEmbeddings,
    adapter: &Adapter,
) -> Result<f64, FinetuneError> {
    Ok(info_nce_loss_and_grad(batch, embeddings, adapter)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub in_batch_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            learning_rate: 0.5,
            batch_size: 64,
            epochs: 5,
            seed: 0,
            in_batch_negatives: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub adapter: Adapter,
    /// Mean batch loss at each update step, before the update.
    pub loss_curve: Vec<f64>,
}

/// Minibatch gradient descent on the adapter, starting from `initial`.
pub fn train_adapter(
    triplets: &[LabeledTriplet],
    embeddings: &BaseEmbeddings,
    initial: Adapter,
    config: &TrainConfig,
) -> Result<TrainingOutcome, FinetuneError> {
    if triplets.is_empty() {
        return Err(FinetuneError::NoTriplets);
    }
    if !(config.temperature > 0.0) {
        return Err(FinetuneError::InvalidTemperature(config.temperature));
    }
    let mut adapter = initial;
    let mut loss_curve = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let batch_size = config.batch_size.max(1);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch = InfoNceBatch {
                items: chunk.iter().map(|&i| InfoNceItem::from(&triplets[i])).collect(),
                temperature: config.temperature,
                in_batch_negatives: config.in_batch_negatives,
            };
            let (loss, grad) = info_nce_loss_and_grad(&batch, embeddings, &adapter)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FinetuneError::NonFiniteLoss {
                    step: loss_curve.len(),
                    epoch,
                });
            }
            loss_curve.push(loss);
            for (w, g) in adapter.matrix.iter_mut().zip(&grad) {
                *w -= config.learning_rate * g;
            }
            adapter.trained_steps += 1;
        }
    }
    Ok(TrainingOutcome { adapter, loss_curve })
}
