use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::TestSample;
use super::EvaluationError;
use crate::bank::{CaseBank, CaseId};
use crate::metrics::{function_f1, score_pair, ScriptScore};
use crate::retrieval::{Embedder, RetrievalIndex};
use crate::reuse::{Decoding, GenerationRequest, RetrievedCase, ReuseEngine};
use crate::script::{detect_repetition_default, extract_functions, ScriptSource};

/// Bumped whenever a report field changes meaning or disappears.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub query_id: CaseId,
    pub retrieved_ids: Vec<CaseId>,
    /// `None` when retrieval or generation failed.
    pub score: Option<ScriptScore>,
    pub repetitive: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scored_samples: usize,
    pub code_similarity: f64,
    pub function_precision: f64,
    pub function_recall: f64,
    pub function_f1: f64,
}

impl Aggregates {
    /// Arithmetic means over scored samples, summed in sample order.
    /// `None` when nothing was scored.
    pub fn from_samples(samples: &[SampleResult]) -> Option<Self> {
        let scores: Vec<&ScriptScore> = samples.iter().filter_map(|s| s.score.as_ref()).collect();
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&ScriptScore) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
        Some(Self {
            scored_samples: scores.len(),
            code_similarity: mean(|s| s.code_similarity),
            function_precision: mean(|s| s.function_precision),
            function_recall: mean(|s| s.function_recall),
            function_f1: mean(|s| s.function_f1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub bank_size: usize,
    pub bank_revision: u64,
    pub test_size: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub generator_id: String,
    pub split: SplitDescriptor,
    pub samples: Vec<SampleResult>,
    /// `None` when no sample was scored; see `aggregates_undefined`.
    pub aggregates: Option<Aggregates>,
    pub aggregates_undefined: bool,
    /// Share of scored drafts flagged repetitive.
    pub repetitive_generation_rate: Option<f64>,
    pub failures: usize,
}

impl EvaluationReport {
    pub fn from_samples(generator_id: &str, split: SplitDescriptor, samples: Vec<SampleResult>) -> Self {
        let aggregates = Aggregates::from_samples(&samples);
        let flags: Vec<bool> = samples.iter().filter_map(|s| s.repetitive).collect();
        let repetitive_generation_rate =
            (!flags.is_empty()).then(|| flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64);
        let failures = samples.iter().filter(|s| s.error.is_some()).count();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            generator_id: generator_id.to_string(),
            split,
            aggregates_undefined: aggregates.is_none(),
            aggregates,
            repetitive_generation_rate,
            failures,
            samples,
        }
    }
}

/// Retrieve `m` cases from the bank for each test intent, generate with
/// greedy decoding, and score against the ground-truth script. Failures are
/// recorded per sample; the run continues.
pub fn evaluate_offline(
    bank: &CaseBank,
    test: &[TestSample],
    engine: &ReuseEngine,
    embedder: &Embedder,
    m: usize,
) -> Result<EvaluationReport, EvaluationError> {
    assert!(m >= 1, "m must be at least 1");
    let view = bank.view();
    let index = RetrievalIndex::build(&view, embedder)?;
    let samples: Vec<SampleResult> = test
        .par_iter()
        .map(|sample| evaluate_one(bank, &index, sample, engine, embedder, m))
        .collect();
    let split = SplitDescriptor {
        bank_size: bank.len(),
        bank_revision: bank.revision(),
        test_size: test.len(),
        m,
    };
    Ok(EvaluationReport::from_samples(engine.generator_id(), split, samples))
}

pub(super) fn generate_for(
    bank: &CaseBank,
    index: &RetrievalIndex,
    sample: &TestSample,
    engine: &ReuseEngine,
    embedder: &Embedder,
    m: usize,
) -> Result<(Vec<CaseId>, String), String> {
    let retrieved = if index.is_empty() {
        Vec::new()
    } else {
        let query = embedder.embed(&sample.intent).map_err(|e| e.to_string())?;
        index.top_k(&query, m, None).map_err(|e| e.to_string())?.entries
    };
    let ids: Vec<CaseId> = retrieved.iter().map(|e| e.case_id.clone()).collect();
    let cases = retrieved
        .into_iter()
        .map(|e| RetrievedCase {
            case: bank.get(&e.case_id).expect("index matches bank").clone(),
            similarity: e.similarity,
        })
        .collect();
    let mut request = GenerationRequest::new(sample.intent.clone(), cases);
    request.decoding = Decoding::default();
    request.reference = Some(sample.script.clone());
    let record = engine.generate(&request).map_err(|e| e.to_string())?;
    Ok((ids, record.draft))
}

fn evaluate_one(
    bank: &CaseBank,
    index: &RetrievalIndex,
    sample: &TestSample,
    engine: &ReuseEngine,
    embedder: &Embedder,
    m: usize,
) -> SampleResult {
    match generate_for(bank, index, sample, engine, embedder, m) {
        Ok((retrieved_ids, draft)) => {
            let draft = ScriptSource::new(draft);
            SampleResult {
                query_id: sample.id.clone(),
                retrieved_ids,
                score: Some(score_pair(&draft, &ScriptSource::new(sample.script.as_str()))),
                repetitive: Some(detect_repetition_default(&draft).is_repetitive),
                error: None,
            }
        }
        Err(error) => SampleResult {
            query_id: sample.id.clone(),
            retrieved_ids: Vec::new(),
            score: None,
            repetitive: None,
            error: Some(error),
        },
    }
}

/// Mean FF1 between each case's script and the script of its top-1
/// neighbour among the other cases.
pub fn leave_one_out_top1_ff1(bank: &CaseBank, embedder: &Embedder) -> Result<f64, EvaluationError> {
    if bank.len() < 2 {
        return Err(EvaluationError::TooFewCases { size: bank.len() });
    }
    let index = RetrievalIndex::build(&bank.view(), embedder)?;
    let cases: Vec<_> = bank.cases().collect();
    let scores = cases
        .par_iter()
        .map(|case| {
            let query = embedder.embed(&case.intent)?;
            let top = index.top_k(&query, 1, Some(&case.id))?;
            let neighbour = bank.get(&top.entries[0].case_id).expect("index matches bank");
            Ok(function_f1(
                &extract_functions(&ScriptSource::new(neighbour.script.as_str())),
                &extract_functions(&ScriptSource::new(case.script.as_str())),
            ))
        })
        .collect::<Result<Vec<f64>, EvaluationError>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
