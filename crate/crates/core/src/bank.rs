//! Append-only case bank backed by a JSONL file.
//!
//! Each retain is written and synced to the store before the in-memory bank
//! changes, so a crash after `retain` returns never loses the case.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("embedding has dimension {actual}, bank expects {expected}")]
    EmbeddingDimensionMismatch { expected: usize, actual: usize },
    #[error("case intent must not be empty")]
    EmptyIntent,
    #[error("duplicate case id {0}")]
    DuplicateId(CaseId),
    #[error("unknown case id {0}")]
    UnknownCaseId(CaseId),
    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaseId(pub String);

impl CaseId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CaseId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seed,
    Retained,
    Revised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: CaseId,
    pub intent: String,
    pub script: String,
    pub embedding: Option<Vec<f64>>,
    #[serde(with = "rfc3339")]
    pub created_at: DateTime<Utc>,
    pub source: Provenance,
}

mod rfc3339 {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// Fields of a case before the bank assigns an id.
#[derive(Debug, Clone)]
pub struct NewCase {
    pub id: Option<CaseId>,
    pub intent: String,
    pub script: String,
    pub embedding: Option<Vec<f64>>,
    pub source: Provenance,
    pub created_at: Option<DateTime<Utc>>,
}

impl NewCase {
    pub fn new(intent: impl Into<String>, script: impl Into<String>, source: Provenance) -> Self {
        Self {
            id: None,
            intent: intent.into(),
            script: script.into(),
            embedding: None,
            source,
            created_at: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<CaseId>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn created_at(mut self, at: DateTime<Utc>) -> Self {
        self.created_at = Some(at);
        self
    }
}

impl From<String> for CaseId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Durable append target for retained cases.
pub trait CaseStore: Send + Sync {
    fn append(&mut self, case: &Case) -> Result<(), BankError>;
}

pub struct JsonlStore {
    path: PathBuf,
    file: File,
}

impl JsonlStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, BankError> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl CaseStore for JsonlStore {
    fn append(&mut self, case: &Case) -> Result<(), BankError> {
        let mut line = serde_json::to_string(case).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[derive(Default)]
pub struct CaseBank {
    cases: Vec<Arc<Case>>,
    positions: HashMap<CaseId, usize>,
    embedding_dimension: Option<usize>,
    revision: u64,
    next_serial: u64,
    store: Option<Box<dyn CaseStore>>,
}

impl fmt::Debug for CaseBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CaseBank")
            .field("len", &self.cases.len())
            .field("embedding_dimension", &self.embedding_dimension)
            .field("revision", &self.revision)
            .field("persistent", &self.store.is_some())
            .finish()
    }
}

impl CaseBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dimension(dimension: usize) -> Self {
        Self {
            embedding_dimension: Some(dimension),
            ..Self::default()
        }
    }

    /// Open (or create) a JSONL-backed bank. A torn final line, left by a
    /// crash mid-append, is dropped and truncated away; any other malformed
    /// line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BankError> {
        let path = path.as_ref();
        let mut bank = if path.exists() {
            let (bank, valid_len) = Self::read(path, true)?;
            let actual_len = std::fs::metadata(path)?.len();
            if valid_len < actual_len {
                tracing::warn!(path = %path.display(), "truncating torn final record");
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(valid_len)?;
                f.sync_all()?;
            } else if actual_len > 0 && !ends_with_newline(path)? {
                let mut f = OpenOptions::new().append(true).open(path)?;
                f.write_all(b"\n")?;
                f.sync_data()?;
            }
            bank
        } else {
            Self::new()
        };
        bank.store = Some(Box::new(JsonlStore::open(path)?));
        Ok(bank)
    }

    /// Strict load; the returned bank is in-memory only.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        Ok(Self::read(path.as_ref(), false)?.0)
    }

    fn read(path: &Path, tolerate_torn_tail: bool) -> Result<(Self, u64), BankError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut bank = Self::new();
        let mut buf = String::new();
        let mut offset = 0u64;
        let mut line_no = 0;
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = buf.ends_with('\n');
            let text = buf.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                offset += n as u64;
                continue;
            }
            match serde_json::from_str::<Case>(text) {
                Ok(case) => bank.push_loaded(case, line_no)?,
                Err(_) if !complete && tolerate_torn_tail => break,
                Err(e) => {
                    return Err(BankError::MalformedRecord {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
            offset += n as u64;
        }
        Ok((bank, offset))
    }

    fn push_loaded(&mut self, case: Case, line: usize) -> Result<(), BankError> {
        let malformed = |message: String| BankError::MalformedRecord { line, message };
        if case.intent.is_empty() {
            return Err(malformed("empty intent".into()));
        }
        if self.contains(&case.id) {
            return Err(malformed(format!("duplicate id {}", case.id)));
        }
        if let Some(e) = &case.embedding {
            match self.embedding_dimension {
                Some(d) if d != e.len() => {
                    return Err(malformed(format!("embedding dimension {} != {d}", e.len())))
                }
                None => self.embedding_dimension = Some(e.len()),
                _ => {}
            }
        }
        self.positions.insert(case.id.clone(), self.cases.len());
        self.cases.push(Arc::new(case));
        self.revision += 1;
        Ok(())
    }

    /// Write every case to `path` as JSONL, replacing the file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        let mut out = BufWriter::new(File::create(path)?);
        for case in &self.cases {
            serde_json::to_writer(&mut out, case.as_ref()).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn embedding_dimension(&self) -> Option<usize> {
        self.embedding_dimension
    }

    pub fn set_embedding_dimension(&mut self, dimension: usize) -> Result<(), BankError> {
        if let Some(c) = self.cases.iter().find_map(|c| c.embedding.as_ref()) {
            if c.len() != dimension {
                return Err(BankError::EmbeddingDimensionMismatch {
                    expected: dimension,
                    actual: c.len(),
                });
            }
        }
        self.embedding_dimension = Some(dimension);
        Ok(())
    }

    pub fn cases(&self) -> impl ExactSizeIterator<Item = &Case> {
        self.cases.iter().map(Arc::as_ref)
    }

    pub fn get(&self, id: &CaseId) -> Option<&Case> {
        self.positions.get(id).map(|&i| self.cases[i].as_ref())
    }

    pub fn contains(&self, id: &CaseId) -> bool {
        self.positions.contains_key(id)
    }

    fn fresh_id(&mut self) -> CaseId {
        loop {
            self.next_serial += 1;
            let id = CaseId(format!("c{:08}", self.next_serial));
            if !self.contains(&id) {
                return id;
            }
        }
    }

    /// Append a case. Durable before return when the bank has a store.
    pub fn retain(&mut self, new: NewCase) -> Result<Arc<Case>, BankError> {
        if new.intent.is_empty() {
            return Err(BankError::EmptyIntent);
        }
        if let (Some(expected), Some(e)) = (self.embedding_dimension, &new.embedding) {
            if e.len() != expected {
                return Err(BankError::EmbeddingDimensionMismatch {
                    expected,
                    actual: e.len(),
                });
            }
        }
        let id = match new.id {
            Some(id) if self.contains(&id) => return Err(BankError::DuplicateId(id)),
            Some(id) => id,
            None => self.fresh_id(),
        };
        let case = Case {
            id,
            intent: new.intent,
            script: new.script,
            embedding: new.embedding,
            created_at: new.created_at.unwrap_or_else(|| Utc::now().trunc_subsecs(3)),
            source: new.source,
        };
        if let Some(store) = self.store.as_mut() {
            store.append(&case)?;
        }
        if let Some(e) = &case.embedding {
            self.embedding_dimension.get_or_insert(e.len());
        }
        let case = Arc::new(case);
        self.positions.insert(case.id.clone(), self.cases.len());
        self.cases.push(Arc::clone(&case));
        self.revision += 1;
        Ok(case)
    }

    /// Convenience wrapper for the common intent/script/embedding retain.
    pub fn retain_case(
        &mut self,
        intent: &str,
        script: &str,
        embedding: Option<Vec<f64>>,
    ) -> Result<Arc<Case>, BankError> {
        let mut new = NewCase::new(intent, script, Provenance::Retained);
        new.embedding = embedding;
        self.retain(new)
    }

    pub fn view(&self) -> BankView<'_> {
        BankView {
            cases: &self.cases,
            excluded: None,
            revision: self.revision,
        }
    }

    pub fn leave_one_out(&self, held_out: &CaseId) -> Result<BankView<'_>, BankError> {
        let index = self
            .cases
            .iter()
            .position(|c| &c.id == held_out)
            .ok_or_else(|| BankError::UnknownCaseId(held_out.clone()))?;
        Ok(BankView {
            cases: &self.cases,
            excluded: Some(index),
            revision: self.revision,
        })
    }

    /// Owned point-in-time copy; later retains are invisible to it.
    pub fn snapshot(&self) -> BankSnapshot {
        BankSnapshot {
            cases: self.cases.clone(),
            revision: self.revision,
        }
    }
}

/// Read-only window over a bank, optionally hiding one case.
#[derive(Debug, Clone, Copy)]
pub struct BankView<'a> {
    cases: &'a [Arc<Case>],
    excluded: Option<usize>,
    revision: u64,
}

impl<'a> BankView<'a> {
    pub fn iter(&self) -> impl Iterator<Item = &'a Case> + 'a {
        let excluded = self.excluded;
        self.cases
            .iter()
            .enumerate()
            .filter(move |(i, _)| Some(*i) != excluded)
            .map(|(_, c)| c.as_ref())
    }

    pub fn len(&self) -> usize {
        self.cases.len() - usize::from(self.excluded.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn get(&self, id: &CaseId) -> Option<&'a Case> {
        self.iter().find(|c| &c.id == id)
    }
}

#[derive(Debug, Clone)]
pub struct BankSnapshot {
    cases: Vec<Arc<Case>>,
    revision: u64,
}

impl BankSnapshot {
    pub fn view(&self) -> BankView<'_> {
        BankView {
            cases: &self.cases,
            excluded: None,
            revision: self.revision,
        }
    }

    pub fn leave_one_out(&self, held_out: &CaseId) -> Result<BankView<'_>, BankError> {
        let index = self
            .cases
            .iter()
            .position(|c| &c.id == held_out)
            .ok_or_else(|| BankError::UnknownCaseId(held_out.clone()))?;
        Ok(BankView {
            cases: &self.cases,
            excluded: Some(index),
            revision: self.revision,
        })
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    Ok(last[0] == b'\n')
}

/// Timestamp formatting used across the crate's JSON outputs.
pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}
