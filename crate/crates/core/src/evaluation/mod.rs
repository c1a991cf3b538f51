//! Synthetic corpora, offline evaluation and the sequential online
//! simulation with and without retain.

mod corpus;
mod offline;
mod online;

use thiserror::Error;

use crate::bank::BankError;
use crate::retrieval::RetrievalError;

pub use corpus::{
    cases_to_bank, generate_corpus, generate_paraphrase_corpus, read_test_samples, write_test_samples, Corpus,
    ParaphraseCorpusSpec, SyntheticCase, SyntheticCorpusSpec, TestSample,
};
pub use offline::{
    evaluate_offline, leave_one_out_top1_ff1, Aggregates, EvaluationReport, SampleResult, SplitDescriptor, REPORT_SCHEMA_VERSION,
};
pub use online::{simulate_online, write_series, OnlineConfig, OnlinePoint, OnlineSeries};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("bank has {size} case(s); leave-one-out retrieval needs at least 2")]
    TooFewCases { size: usize },
    #[error("malformed split line {line}: {message}")]
    MalformedSplit { line: usize, message: String },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
