//! Per-step run records, stored as line-delimited JSON.
//!
//! The first line is a header object (`kind = "header"`); every following
//! line is one train or eval record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Seconds since the run started; always 0 in reference mode.
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    run_id: String,
    stage: String,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub stage: String,
    pub config_hash: String,
    pub records: Vec<StepRecord>,
}

impl RunMetrics {
    pub fn new(
        run_id: impl Into<String>,
        stage: impl ToString,
        config_hash: impl Into<String>,
    ) -> Self {
        RunMetrics {
            run_id: run_id.into(),
            stage: stage.to_string(),
            config_hash: config_hash.into(),
            records: Vec::new(),
        }
    }

    pub fn of_kind(&self, kind: RecordKind) -> impl Iterator<Item = &StepRecord> + '_ {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn last(&self, kind: RecordKind) -> Option<&StepRecord> {
        self.of_kind(kind).last()
    }

    /// Steps strictly increase within each kind and every loss is finite.
    pub fn validate(&self) -> Result<(), TrainError> {
        for kind in [RecordKind::Train, RecordKind::Eval] {
            let mut prev: Option<u64> = None;
            for r in self.of_kind(kind) {
                if prev.is_some_and(|p| r.step <= p) {
                    return Err(TrainError::Metrics(format!("step {} out of order", r.step)));
                }
                if !r.loss.is_finite() {
                    return Err(TrainError::Metrics(format!(
                        "non-finite loss at step {}",
                        r.step
                    )));
                }
                prev = Some(r.step);
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            kind: "header".into(),
            run_id: self.run_id.clone(),
            stage: self.stage.clone(),
            config_hash: self.config_hash.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| TrainError::Metrics("empty metrics file".into()))?;
        let header: Header =
            serde_json::from_str(head).map_err(|e| TrainError::Metrics(e.to_string()))?;
        if header.kind != "header" {
            return Err(TrainError::Metrics("first line is not a header".into()));
        }
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Metrics(e.to_string())))
            .collect::<Result<Vec<StepRecord>, _>>()?;
        let m = RunMetrics {
            run_id: header.run_id,
            stage: header.stage,
            config_hash: header.config_hash,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        atomic::write_file(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}
