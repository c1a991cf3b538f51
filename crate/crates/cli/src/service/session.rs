use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cbr_core::bank::{CaseBank, CaseId, Provenance};
use cbr_core::{function_f1, extract_functions, ScriptSource};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Drafted,
    Revised,
    Retained,
    Discarded,
}

impl SessionStatus {
    pub fn is_open(self) -> bool {
        matches!(self, Self::Drafted | Self::Revised)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub id: CaseId,
    pub intent: String,
    pub script: String,
    pub source: Provenance,
    pub similarity: f64,
}

/// One pass through Revise for a single intent. The retrieved cases are
/// copied in at creation and never change afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub intent: String,
    pub retrieved: Vec<CaseSummary>,
    pub draft: String,
    pub generator_id: String,
    pub bank_revision: u64,
    pub low_confidence: bool,
    pub repetitive_draft: bool,
    pub status: SessionStatus,
    pub revised_script: Option<String>,
    pub final_script: Option<String>,
    pub case_id: Option<CaseId>,
}

impl Session {
    /// Id of the case this session retains. Fixed per session, so a retain
    /// replayed after a crash can never add a second copy.
    pub fn case_id(&self) -> CaseId {
        CaseId::new(format!("s-{}", self.id))
    }

    pub fn draft_vs_final_ff1(&self) -> Option<f64> {
        let final_script = self.final_script.as_deref()?;
        Some(function_f1(
            &extract_functions(&ScriptSource::new(self.draft.as_str())),
            &extract_functions(&ScriptSource::new(final_script)),
        ))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StatusCounts {
    pub drafted: usize,
    pub revised: usize,
    pub retained: usize,
    pub discarded: usize,
    pub total: usize,
}

/// In-memory sessions plus an append-only journal of session snapshots.
#[derive(Default)]
pub struct SessionTable {
    sessions: HashMap<String, Session>,
    journal: Option<File>,
    journal_path: Option<PathBuf>,
    /// Draft-vs-final FF1 of each retain, in retain order.
    pub ff1_series: Vec<f64>,
    pub drafts: usize,
    pub repetitive_drafts: usize,
}

impl SessionTable {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replay the journal at `path` and reconcile it with `bank`: a session
    /// whose case is already in the bank is retained, whatever the journal
    /// says.
    pub fn open(path: &Path, bank: &CaseBank) -> std::io::Result<Self> {
        let mut table = Self::default();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Session>(&line) {
                    Ok(session) => table.replay(session),
                    Err(e) => tracing::warn!(line = i + 1, error = %e, "skipping unreadable journal line"),
                }
            }
        }
        let mut recovered = Vec::new();
        for session in table.sessions.values_mut() {
            let case_id = session.case_id();
            if session.status != SessionStatus::Retained {
                if let Some(case) = bank.get(&case_id) {
                    session.status = SessionStatus::Retained;
                    session.final_script = Some(case.script.clone());
                    session.case_id = Some(case_id);
                    recovered.push(session.clone());
                }
            }
        }
        recovered.sort_by(|a, b| a.id.cmp(&b.id));
        table.journal = Some(OpenOptions::new().create(true).append(true).open(path)?);
        table.journal_path = Some(path.to_path_buf());
        for session in recovered {
            tracing::info!(session = %session.id, "session recovered as retained from the case bank");
            table.ff1_series.extend(session.draft_vs_final_ff1());
            table.write_journal(&session);
        }
        Ok(table)
    }

    fn replay(&mut self, session: Session) {
        match self.sessions.get(&session.id) {
            None => {
                self.drafts += 1;
                self.repetitive_drafts += usize::from(session.repetitive_draft);
                self.ff1_series.extend(session.draft_vs_final_ff1());
            }
            Some(previous) if previous.final_script.is_none() => {
                self.ff1_series.extend(session.draft_vs_final_ff1());
            }
            Some(_) => {}
        }
        self.sessions.insert(session.id.clone(), session);
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal_path.as_deref()
    }

    fn write_journal(&mut self, session: &Session) {
        let Some(file) = self.journal.as_mut() else { return };
        let result = serde_json::to_string(session)
            .map_err(std::io::Error::other)
            .and_then(|mut line| {
                line.push('\n');
                file.write_all(line.as_bytes())?;
                file.flush()
            });
        if let Err(e) = result {
            tracing::warn!(session = %session.id, error = %e, "session journal write failed");
        }
    }

    pub fn insert(&mut self, session: Session) {
        self.drafts += 1;
        self.repetitive_drafts += usize::from(session.repetitive_draft);
        self.write_journal(&session);
        self.sessions.insert(session.id.clone(), session);
    }

    pub fn get(&self, id: &str) -> Option<&Session> {
        self.sessions.get(id)
    }

    /// Apply `change` to a session and journal the result.
    pub fn update(&mut self, id: &str, change: impl FnOnce(&mut Session)) -> Option<Session> {
        let session = self.sessions.get_mut(id)?;
        let before = session.final_script.is_some();
        change(session);
        let session = session.clone();
        if !before {
            if let Some(ff1) = session.draft_vs_final_ff1() {
                self.ff1_series.push(ff1);
            }
        }
        self.write_journal(&session);
        Some(session)
    }

    pub fn counts(&self) -> StatusCounts {
        let mut counts = StatusCounts::default();
        for session in self.sessions.values() {
            match session.status {
                SessionStatus::Drafted => counts.drafted += 1,
                SessionStatus::Revised => counts.revised += 1,
                SessionStatus::Retained => counts.retained += 1,
                SessionStatus::Discarded => counts.discarded += 1,
            }
            counts.total += 1;
        }
        counts
    }
}
