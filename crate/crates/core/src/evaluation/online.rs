use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::TestSample;
use super::offline::generate_for;
use super::EvaluationError;
use crate::bank::{CaseBank, NewCase, Provenance};
use crate::metrics::score_pair;
use crate::retrieval::{Embedder, RetrievalIndex};
use crate::reuse::ReuseEngine;
use crate::script::ScriptSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub m: usize,
    pub retain: bool,
    /// Width of the diagnostic windowed mean.
    pub window: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            m: 3,
            retain: true,
            window: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlinePoint {
    /// 1-based request number.
    pub step: usize,
    /// FF1 of this request's draft; 0 when generation failed.
    pub ff1: f64,
    pub cumulative_ff1: f64,
    pub windowed_ff1: f64,
    pub bank_size: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSeries {
    pub generator_id: String,
    pub config: OnlineConfig,
    pub points: Vec<OnlinePoint>,
    pub retained: usize,
    pub revised: usize,
}

impl OnlineSeries {
    pub fn final_cumulative_ff1(&self) -> Option<f64> {
        self.points.last().map(|p| p.cumulative_ff1)
    }
}

/// Process `stream` in order: retrieve from the current bank, generate,
/// score against ground truth, then (when enabled) retain the ground-truth
/// script as the revised solution. A retain whose script differs from the
/// draft is recorded as `revised`.
pub fn simulate_online(
    bank: &mut CaseBank,
    stream: &[TestSample],
    engine: &ReuseEngine,
    embedder: &Embedder,
    config: &OnlineConfig,
) -> Result<OnlineSeries, EvaluationError> {
    assert!(config.m >= 1 && config.window >= 1, "m and window must be positive");
    let mut index = RetrievalIndex::build(&bank.view(), embedder)?;
    let mut series = OnlineSeries {
        generator_id: engine.generator_id().to_string(),
        config: *config,
        points: Vec::with_capacity(stream.len()),
        retained: 0,
        revised: 0,
    };
    let mut total = 0.0;
    let mut window: VecDeque<f64> = VecDeque::with_capacity(config.window);

    for (i, sample) in stream.iter().enumerate() {
        let outcome = generate_for(bank, &index, sample, engine, embedder, config.m);
        let (ff1, draft) = match &outcome {
            Ok((_, draft)) => (
                score_pair(
                    &ScriptSource::new(draft.as_str()),
                    &ScriptSource::new(sample.script.as_str()),
                )
                .function_f1,
                Some(draft),
            ),
            Err(e) => {
                tracing::warn!(request = %sample.id, error = %e, "online request failed");
                (0.0, None)
            }
        };
        total += ff1;
        if window.len() == config.window {
            window.pop_front();
        }
        window.push_back(ff1);

        if config.retain {
            let source = if draft.is_some_and(|d| *d == sample.script) {
                Provenance::Retained
            } else {
                series.revised += 1;
                Provenance::Revised
            };
            let case = bank.retain(NewCase::new(sample.intent.clone(), sample.script.clone(), source))?;
            index.push(&case, embedder)?;
            series.retained += 1;
        }

        series.points.push(OnlinePoint {
            step: i + 1,
            ff1,
            cumulative_ff1: total / (i + 1) as f64,
            windowed_ff1: window.iter().sum::<f64>() / window.len() as f64,
            bank_size: bank.len(),
            failed: outcome.is_err(),
        });
    }
    Ok(series)
}

pub fn write_series(path: impl AsRef<Path>, series: &OnlineSeries) -> Result<(), EvaluationError> {
    let mut out = BufWriter::new(File::create(path)?);
    for point in &series.points {
        serde_json::to_writer(&mut out, point).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
