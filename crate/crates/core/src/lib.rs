//! Case-based reasoning engine for functional test-script generation.
//!
//! The deployed loop is Retrieve → Reuse → Revise → Retain over a persistent
//! [`bank::CaseBank`]. Around it sit the offline metrics, pseudo-label mining
//! and contrastive adapter training for retrieval, policy-gradient finetuning
//! on an enumerable toy policy, and an evaluation harness.

pub mod bank;
pub mod evaluation;
pub mod finetune;
pub mod metrics;
pub mod retrieval;
pub mod rlft;
pub mod reuse;
pub mod script;

pub use bank::{Case, CaseBank, CaseId, Provenance};
pub use metrics::{code_similarity, function_f1, score_pair, ScriptScore};
pub use script::{extract_functions, FunctionCallSet, ScriptSource};
