//! Stage markers: each output directory records the hash of everything its
//! stage consumed and the hash of what it produced, so a rerun with the
//! same inputs can be skipped.

use std::fs;
use std::path::Path;

use procwarm::atomic;
use procwarm::kv::{short_hash, KvDoc};

use crate::CliError;

pub const MARKER: &str = "stage.txt";

/// Inputs of a stage: a kind tag plus named values (config entries, input
/// content hashes).
#[derive(Debug, Clone)]
pub struct StageInputs {
    pub doc: KvDoc,
}

impl StageInputs {
    pub fn new(stage: &str) -> Self {
        let mut doc = KvDoc::new();
        doc.push("stage", stage);
        StageInputs { doc }
    }

    pub fn add(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.doc.push(key, value);
        self
    }

    pub fn hash(&self) -> String {
        short_hash(self.doc.render().as_bytes())
    }
}

/// Whether `dir` holds a completed stage for `inputs` whose recorded output
/// hash still equals `current_output()`.
pub fn up_to_date(
    dir: &Path,
    inputs: &StageInputs,
    current_output: impl FnOnce() -> Option<String>,
) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(MARKER)) else {
        return false;
    };
    let Ok(doc) = KvDoc::parse(&text) else {
        return false;
    };
    if doc.get("input_hash") != Some(inputs.hash().as_str()) {
        return false;
    }
    match (doc.get("output_hash"), current_output()) {
        (Some(recorded), Some(now)) => recorded == now,
        _ => false,
    }
}

pub fn write_marker(dir: &Path, inputs: &StageInputs, output_hash: &str) -> Result<(), CliError> {
    let mut doc = inputs.doc.clone();
    doc.push("input_hash", inputs.hash())
        .push("output_hash", output_hash);
    atomic::write_file(&dir.join(MARKER), doc.render().as_bytes())?;
    Ok(())
}

/// Recorded output hash of the stage that produced `dir`, if any.
pub fn recorded_output(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join(MARKER)).ok()?;
    KvDoc::parse(&text)
        .ok()?
        .get("output_hash")
        .map(str::to_string)
}
