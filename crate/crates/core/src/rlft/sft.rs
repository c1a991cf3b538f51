use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RlftError;
use crate::bank::{CaseBank, CaseId};
use crate::retrieval::{Embedder, RetrievalIndex};
use crate::reuse::{assemble_prompt, GenerationRequest, RetrievedCase};

/// One supervised example: the reuse prompt built from the case's
/// leave-one-out neighbours, paired with its own script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
    pub query_id: CaseId,
    pub retrieved_ids: Vec<CaseId>,
}

/// Build one record per case, in bank order, retrieving `min(m, size − 1)`
/// other cases for each.
pub fn export_sft_dataset(bank: &CaseBank, embedder: &Embedder, m: usize) -> Result<Vec<SftRecord>, RlftError> {
    assert!(m >= 1, "m must be at least 1");
    if bank.len() < 2 {
        return Err(RlftError::BankTooSmall { size: bank.len() });
    }
    let view = bank.view();
    let index = RetrievalIndex::build(&view, embedder)?;
    let mut records = Vec::with_capacity(bank.len());
    for case in bank.cases() {
        let query = embedder.embed(&case.intent)?;
        let result = index.top_k(&query, m, Some(&case.id))?;
        let retrieved: Vec<RetrievedCase> = result
            .entries
            .iter()
            .map(|e| RetrievedCase {
                case: bank.get(&e.case_id).expect("index built from this bank").clone(),
                similarity: e.similarity,
            })
            .collect();
        let request = GenerationRequest::new(case.intent.clone(), retrieved);
        records.push(SftRecord {
            prompt: assemble_prompt(&request),
            completion: case.script.clone(),
            query_id: case.id.clone(),
            retrieved_ids: result.entries.into_iter().map(|e| e.case_id).collect(),
        });
    }
    Ok(records)
}

pub fn write_sft_dataset(path: impl AsRef<Path>, records: &[SftRecord]) -> Result<(), RlftError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
