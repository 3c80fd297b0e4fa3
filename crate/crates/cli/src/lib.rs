//! Command-line front end: corpus generation and statistics, warm-up,
//! surgery, fine-tuning, reports and the end-to-end pipeline.

pub mod args;
pub mod commands;
pub mod pipeline;
pub mod report;
pub mod stage;

use std::io;

use thiserror::Error;

use procwarm::corpus::CorpusError;
use procwarm::grammar::GrammarError;
use procwarm::images::ImageError;
use procwarm::kv::KvError;
use procwarm::model::ModelError;
use procwarm::surgery::SurgeryError;
use procwarm::trainer::TrainError;

pub use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    StageGuard(String),
    #[error("{0}")]
    ConfigMismatch(String),
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Images(#[from] ImageError),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("plot: {0}")]
    Plot(String),
}

impl CliError {
    /// Stable identifier printed in the error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::StageGuard(_) => "stage",
            CliError::ConfigMismatch(_) => "config_mismatch",
            CliError::Missing(_) => "missing",
            CliError::Grammar(_) => "grammar",
            CliError::Corpus(_) => "corpus",
            CliError::Model(ModelError::WrongStage { .. }) => "stage",
            CliError::Model(_) => "model",
            CliError::Train(TrainError::Shape(_)) => "config_mismatch",
            CliError::Train(TrainError::NonFinite { .. }) => "non_finite",
            CliError::Train(_) => "train",
            CliError::Surgery(_) => "surgery",
            CliError::Images(_) => "images",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Plot(_) => "plot",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error: <kind>: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {}: {msg}", self.kind())
    }
}

/// Run one parsed invocation, writing human-readable progress to `out`.
pub fn run(cli: &Cli, out: &mut dyn io::Write) -> Result<(), CliError> {
    commands::dispatch(cli, out)
}
