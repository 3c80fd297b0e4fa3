//! Compact transformer encoder with a frozen token adapter for warm-up and a
//! patch adapter for images, plus hand-written gradients.

pub mod checkpoint;
pub mod config;
pub mod linalg;
pub mod network;
pub mod params;

use thiserror::Error;

pub use checkpoint::{fresh_vision_io, init_model, init_vision_model, Checkpoint, NamedTensor};
pub use config::{ModelConfig, Stage};
pub use linalg::Real;
pub use network::{backward, forward, BackwardOptions, ForwardPass, Input};
pub use params::{ModelParams, TensorKind};

use crate::grammar::Symbol;
use crate::kv::KvError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint layout: {0}")]
    Layout(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} out of range (limit {limit})")]
    TokenOutOfRange { id: Symbol, limit: usize },
    #[error("wrong stage: expected {expected}, found {found}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    PayloadSizeMismatch { expected: usize, actual: usize },
    #[error("manifest: {0}")]
    Manifest(#[from] KvError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
