//! Named-tensor checkpoints and their on-disk format.
//!
//! A checkpoint directory holds `manifest.txt` and `tensors.f32`. The
//! manifest records format version, stage, step, seed, model config, free
//! metadata and one `tensor = name f32 AxB frozen offset` line per tensor.
//! The payload is every tensor's little-endian `f32` values concatenated in
//! manifest order.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, Stage};
use super::params::{layout, TensorKind};
use super::ModelError;
use crate::atomic;
use crate::kv::{sha256_hex, short_hash, KvDoc};
use crate::rng::{self, Lane};

pub const FORMAT: &str = "procwarm-checkpoint";
pub const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const PAYLOAD: &str = "tensors.f32";

/// Init standard deviation for weights, positions and the class token.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub frozen: bool,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bit_eq(&self, other: &NamedTensor) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.frozen == other.frozen
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
    /// Free-form provenance, kept in insertion order.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.frozen)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Bitwise equality, including flags and metadata.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.stage == other.stage
            && self.step == other.step
            && self.seed == other.seed
            && self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn require_stage(&self, stage: Stage) -> Result<(), ModelError> {
        if self.stage != stage {
            return Err(ModelError::WrongStage {
                expected: stage,
                found: self.stage,
            });
        }
        Ok(())
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.tensors.iter().map(|t| t.data.len() * 4).sum());
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    fn manifest(&self, payload: &[u8]) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("format", FORMAT)
            .push("version", VERSION)
            .push("stage", self.stage)
            .push("step", self.step)
            .push("seed", self.seed);
        self.config.to_kv(&mut d);
        d.push("config_hash", self.config.hash());
        for (k, v) in &self.meta {
            d.push(&format!("meta.{k}"), v);
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
            d.push(
                "tensor",
                format!(
                    "{} f32 {} {} {}",
                    t.name,
                    shape.join("x"),
                    u8::from(t.frozen),
                    offset
                ),
            );
            offset += t.data.len() * 4;
        }
        d.push("payload_bytes", payload.len())
            .push("payload_sha256", sha256_hex(payload));
        d
    }

    /// Manifest text and payload bytes.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let payload = self.payload();
        (self.manifest(&payload).render(), payload)
    }

    /// Hash of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        let (m, p) = self.encode();
        let mut bytes = m.into_bytes();
        bytes.extend_from_slice(&p);
        short_hash(&bytes)
    }

    pub fn write(&self, dir: &Path) -> Result<(), ModelError> {
        let (manifest, payload) = self.encode();
        atomic::write_dir(dir, &[(MANIFEST, manifest.as_bytes()), (PAYLOAD, &payload)])?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Checkpoint, ModelError> {
        let d = KvDoc::parse(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let format = d.require("format")?;
        if format != FORMAT {
            return Err(ModelError::Format(format!(
                "not a checkpoint (format `{format}`)"
            )));
        }
        let version: u32 = d.parse_key("version")?;
        if version != VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let stage: Stage = d.require("stage")?.parse().map_err(ModelError::Format)?;
        let config = ModelConfig::from_kv(&d)?;
        config.validate()?;
        let payload = fs::read(dir.join(PAYLOAD))?;
        let declared: usize = d.parse_key("payload_bytes")?;
        if declared != payload.len() {
            return Err(ModelError::PayloadSizeMismatch {
                expected: declared,
                actual: payload.len(),
            });
        }
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        for line in d.get_all("tensor") {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, shape, frozen, off] = parts[..] else {
                return Err(ModelError::Format(format!("bad tensor line `{line}`")));
            };
            if dtype != "f32" {
                return Err(ModelError::Format(format!("unsupported dtype `{dtype}`")));
            }
            let shape: Vec<usize> = shape
                .split('x')
                .map(|s| s.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| ModelError::Format(format!("bad shape in `{line}`")))?;
            let numel: usize = shape.iter().product();
            if off.parse::<usize>().ok() != Some(offset) {
                return Err(ModelError::Format(format!("bad offset in `{line}`")));
            }
            let end = offset + numel * 4;
            if end > payload.len() {
                return Err(ModelError::PayloadSizeMismatch {
                    expected: end,
                    actual: payload.len(),
                });
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape,
                data,
                frozen: frozen == "1",
            });
            offset = end;
        }
        if offset != payload.len() {
            return Err(ModelError::PayloadSizeMismatch {
                expected: offset,
                actual: payload.len(),
            });
        }
        let meta = d
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let ckpt = Checkpoint {
            config,
            stage,
            step: d.parse_key("step")?,
            seed: d.parse_key("seed")?,
            tensors,
            meta,
        };
        if let Some(h) = d.get("payload_sha256") {
            if h != sha256_hex(&payload) {
                return Err(ModelError::Format("payload checksum mismatch".into()));
            }
        }
        Ok(ckpt)
    }
}

pub(crate) fn name_key(name: &str) -> u64 {
    // FNV-1a; stable across builds.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Standard normal truncated to `±2` then scaled by `std`.
pub fn truncated_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        })
        .collect()
}

/// Gaussian rows rescaled to unit L2 norm.
pub fn unit_rows<R: Rng>(rng: &mut R, rows: usize, width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let row: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(row.iter().map(|x| (x / norm) as f32));
    }
    out
}

/// Fresh value for one tensor of the layout, drawn from its own stream.
pub(crate) fn init_tensor(
    name: &str,
    shape: &[usize],
    kind: TensorKind,
    seed: u64,
    lane: Lane,
) -> Vec<f32> {
    let n: usize = shape.iter().product();
    let mut rng = rng::keyed(seed, name_key(name), lane);
    let is_bias = name.ends_with(".bias");
    match kind {
        TensorKind::TokenEmbed => unit_rows(&mut rng, shape[0], shape[1]),
        TensorKind::Norm if name.ends_with(".weight") => vec![1.0; n],
        TensorKind::Norm => vec![0.0; n],
        _ if is_bias => vec![0.0; n],
        _ => truncated_normal(&mut rng, n, INIT_STD),
    }
}

/// Frozen positions are scaled like the unit-norm token rows (std
/// `1/sqrt(width)`) so that order stays visible next to token identity.
fn frozen_positions(name: &str, shape: &[usize], seed: u64, lane: Lane) -> Vec<f32> {
    let mut rng = rng::keyed(seed, name_key(name), lane);
    truncated_normal(
        &mut rng,
        shape.iter().product(),
        1.0 / (shape[1] as f64).sqrt(),
    )
}

fn frozen_at(stage: Stage, kind: TensorKind) -> bool {
    stage == Stage::Warmup && matches!(kind, TensorKind::TokenEmbed | TensorKind::Position)
}

fn init_stage(
    config: &ModelConfig,
    stage: Stage,
    seed: u64,
    lane: Lane,
) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let tensors = layout(config, stage)
        .into_iter()
        .map(|(name, shape, kind)| NamedTensor {
            data: if frozen_at(stage, kind) && kind == TensorKind::Position {
                frozen_positions(&name, &shape, seed, lane)
            } else {
                init_tensor(&name, &shape, kind, seed, lane)
            },
            frozen: frozen_at(stage, kind),
            name,
            shape,
        })
        .collect();
    Ok(Checkpoint {
        config: config.clone(),
        stage,
        step: 0,
        seed,
        tensors,
        meta: Vec::new(),
    })
}

/// Fresh warm-up-stage model: frozen unit-norm token table and frozen
/// positions, truncated-normal weights, zero biases, identity norms.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    init_stage(config, Stage::Warmup, seed, Lane::Init)
}

/// Fresh vision-stage model drawn from a stream independent of
/// [`init_model`]'s, so its blocks differ from a warm-up init at the same seed.
pub fn init_vision_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    init_stage(config, Stage::Vision, seed, Lane::InitVision)
}

/// Fresh vision input/output tensors (patch projection, class token,
/// positions, class head), keyed by name under the surgery lane.
pub fn fresh_vision_io(config: &ModelConfig, seed: u64) -> Vec<NamedTensor> {
    layout(config, Stage::Vision)
        .into_iter()
        .filter(|(_, _, kind)| {
            matches!(
                kind,
                TensorKind::PatchEmbed
                    | TensorKind::ClassToken
                    | TensorKind::Position
                    | TensorKind::Head
            )
        })
        .map(|(name, shape, kind)| NamedTensor {
            data: init_tensor(&name, &shape, kind, seed, Lane::Surgery),
            frozen: false,
            name,
            shape,
        })
        .collect()
}
