//! Offline business metrics: function precision/recall/F1 over call sets and
//! normalized Levenshtein code similarity.

use serde::{Deserialize, Serialize};

use crate::script::{extract_functions, FunctionCallSet, ScriptSource};

/// |G ∩ R| / |G|. Empty generation scores 1 only against an empty reference.
pub fn function_precision(generated: &FunctionCallSet, reference: &FunctionCallSet) -> f64 {
    if generated.is_empty() {
        return if reference.is_empty() { 1.0 } else { 0.0 };
    }
    generated.intersection_len(reference) as f64 / generated.len() as f64
}

/// |G ∩ R| / |R|. An empty reference is matched only by an empty generation.
pub fn function_recall(generated: &FunctionCallSet, reference: &FunctionCallSet) -> f64 {
    if reference.is_empty() {
        return if generated.is_empty() { 1.0 } else { 0.0 };
    }
    generated.intersection_len(reference) as f64 / reference.len() as f64
}

/// Harmonic mean of precision and recall, evaluated as 2|G ∩ R| / (|G| + |R|)
/// so the result is a single correctly rounded division.
pub fn function_f1(generated: &FunctionCallSet, reference: &FunctionCallSet) -> f64 {
    let total = generated.len() + reference.len();
    if total == 0 {
        return 1.0;
    }
    (2 * generated.intersection_len(reference)) as f64 / total as f64
}

/// Levenshtein distance over Unicode scalar values, two-row DP.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    if short.is_empty() {
        return long.len();
    }

    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut curr = vec![0; short.len() + 1];
    for (i, &lc) in long.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &sc) in short.iter().enumerate() {
            let substitution = prev[j] + usize::from(lc != sc);
            curr[j + 1] = substitution.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// 1 − d_L(a, b) / max(|a|, |b|); two empty strings are identical.
pub fn code_similarity(generated: &str, reference: &str) -> f64 {
    let longest = generated.chars().count().max(reference.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(generated, reference) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptScore {
    pub function_precision: f64,
    pub function_recall: f64,
    pub function_f1: f64,
    pub code_similarity: f64,
}

impl ScriptScore {
    pub fn from_sets(
        generated: &FunctionCallSet,
        reference: &FunctionCallSet,
        generated_text: &str,
        reference_text: &str,
    ) -> Self {
        Self {
            function_precision: function_precision(generated, reference),
            function_recall: function_recall(generated, reference),
            function_f1: function_f1(generated, reference),
            code_similarity: code_similarity(generated_text, reference_text),
        }
    }

    /// Copy with every field rounded to 4 decimals, for reports.
    pub fn rounded(&self) -> Self {
        let r = |x: f64| (x * 1e4).round() / 1e4;
        Self {
            function_precision: r(self.function_precision),
            function_recall: r(self.function_recall),
            function_f1: r(self.function_f1),
            code_similarity: r(self.code_similarity),
        }
    }
}

pub fn score_pair(generated: &ScriptSource, reference: &ScriptSource) -> ScriptScore {
    ScriptScore::from_sets(
        &extract_functions(generated),
        &extract_functions(reference),
        &generated.text,
        &reference.text,
    )
}
