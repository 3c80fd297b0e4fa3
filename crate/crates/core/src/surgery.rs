//! Checkpoint surgery: replacing the input/output adapters after warm-up,
//! shuffling weights within tensors and transplanting block ranges.
//!
//! Plans are plain text, one step per line:
//!
//! ```text
//! # comments and blank lines are ignored
//! shuffle scope=attention seed=3
//! transfer range=middle donor=runs/warmup/checkpoint
//! reset seed=7
//! retag stage=vision
//! ```

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::kv::KvDoc;
use crate::model::checkpoint::name_key;
use crate::model::params::{block_index, layout};
use crate::model::{fresh_vision_io, Checkpoint, ModelError, NamedTensor, Stage, TensorKind};
use crate::rng::{self, Lane};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown shuffle scope `{0}`")]
    UnknownScope(String),
    #[error("unknown layer range `{0}`")]
    UnknownRange(String),
    #[error("config mismatch between donor and target: {0}")]
    ConfigMismatch(String),
    #[error("plan line {line}: {message}")]
    Plan { line: usize, message: String },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleScope {
    All,
    AttentionOnly,
    MlpOnly,
}

impl ShuffleScope {
    fn covers(self, kind: TensorKind) -> bool {
        match self {
            ShuffleScope::All => {
                matches!(kind, TensorKind::AttentionWeight | TensorKind::MlpWeight)
            }
            ShuffleScope::AttentionOnly => kind == TensorKind::AttentionWeight,
            ShuffleScope::MlpOnly => kind == TensorKind::MlpWeight,
        }
    }
}

impl fmt::Display for ShuffleScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShuffleScope::All => "all",
            ShuffleScope::AttentionOnly => "attention",
            ShuffleScope::MlpOnly => "mlp",
        })
    }
}

impl FromStr for ShuffleScope {
    type Err = SurgeryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(ShuffleScope::All),
            "attention" | "attention-only" => Ok(ShuffleScope::AttentionOnly),
            "mlp" | "mlp-only" => Ok(ShuffleScope::MlpOnly),
            _ => Err(SurgeryError::UnknownScope(s.to_string())),
        }
    }
}

/// A third of the block stack. For depths not divisible by three the first
/// two thirds take `depth / 3` blocks each and the final third the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRange {
    First,
    Middle,
    Final,
}

impl LayerRange {
    pub fn blocks(self, depth: usize) -> std::ops::Range<usize> {
        let t = depth / 3;
        match self {
            LayerRange::First => 0..t,
            LayerRange::Middle => t..2 * t,
            LayerRange::Final => 2 * t..depth,
        }
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerRange::First => "first",
            LayerRange::Middle => "middle",
            LayerRange::Final => "final",
        })
    }
}

impl FromStr for LayerRange {
    type Err = SurgeryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(LayerRange::First),
            "middle" => Ok(LayerRange::Middle),
            "final" | "last" => Ok(LayerRange::Final),
            _ => Err(SurgeryError::UnknownRange(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SurgeryStep {
    ResetEmbeddingsAndHead { seed: u64 },
    ShuffleWeights { scope: ShuffleScope, seed: u64 },
    TransferLayers { range: LayerRange, donor: String },
    Retag(Stage),
}

impl fmt::Display for SurgeryStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurgeryStep::ResetEmbeddingsAndHead { seed } => write!(f, "reset seed={seed}"),
            SurgeryStep::ShuffleWeights { scope, seed } => {
                write!(f, "shuffle scope={scope} seed={seed}")
            }
            SurgeryStep::TransferLayers { range, donor } => {
                write!(f, "transfer range={range} donor={donor}")
            }
            SurgeryStep::Retag(stage) => write!(f, "retag stage={stage}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SurgeryPlan {
    pub steps: Vec<SurgeryStep>,
}

impl SurgeryPlan {
    /// The standard hand-off from warm-up to vision training.
    pub fn handoff(seed: u64) -> Self {
        SurgeryPlan {
            steps: vec![
                SurgeryStep::ResetEmbeddingsAndHead { seed },
                SurgeryStep::Retag(Stage::Vision),
            ],
        }
    }

    pub fn parse(text: &str) -> Result<Self, SurgeryError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SurgeryError::Plan {
                line: i + 1,
                message,
            };
            let mut words = line.split_whitespace();
            let op = words.next().unwrap_or_default();
            let mut args = Vec::new();
            for w in words {
                let (k, v) = w
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, found `{w}`")))?;
                args.push((k, v));
            }
            let arg = |key: &str| {
                args.iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| err(format!("`{op}` needs `{key}=`")))
            };
            let seed = || {
                arg("seed")?
                    .parse::<u64>()
                    .map_err(|_| err("seed must be an unsigned integer".into()))
            };
            let step = match op {
                "reset" => SurgeryStep::ResetEmbeddingsAndHead { seed: seed()? },
                "shuffle" => SurgeryStep::ShuffleWeights {
                    scope: arg("scope")?.parse()?,
                    seed: seed()?,
                },
                "transfer" => SurgeryStep::TransferLayers {
                    range: arg("range")?.parse()?,
                    donor: arg("donor")?.to_string(),
                },
                "retag" => SurgeryStep::Retag(
                    arg("stage")?
                        .parse()
                        .map_err(|_| err("stage must be warmup or vision".into()))?,
                ),
                other => return Err(err(format!("unknown step `{other}`"))),
            };
            steps.push(step);
        }
        Ok(SurgeryPlan { steps })
    }

    pub fn render(&self) -> String {
        self.steps.iter().map(|s| format!("{s}\n")).collect()
    }

    /// Whether the plan hands a checkpoint over to vision training: its last
    /// two steps are a reset and a retag to the vision stage.
    pub fn ends_with_handoff(&self) -> bool {
        matches!(
            self.steps.as_slice(),
            [
                ..,
                SurgeryStep::ResetEmbeddingsAndHead { .. },
                SurgeryStep::Retag(Stage::Vision)
            ]
        )
    }
}

/// Drop the token table, masked head and warm-up positions; add a fresh
/// patch projection, class token, vision positions and class head. Block
/// and final-norm tensors are copied bit-exactly and all frozen flags clear.
pub fn reset_embeddings_and_head(ckpt: &Checkpoint, seed: u64) -> Result<Checkpoint, SurgeryError> {
    ckpt.require_stage(Stage::Warmup)?;
    let fresh = fresh_vision_io(&ckpt.config, seed);
    let mut tensors = Vec::new();
    for (name, shape, _) in layout(&ckpt.config, Stage::Vision) {
        let t = match fresh.iter().find(|t| t.name == name) {
            Some(t) => t.clone(),
            None => {
                let src = ckpt
                    .get(&name)
                    .ok_or_else(|| SurgeryError::MissingTensor(name.clone()))?;
                if src.shape != shape {
                    return Err(
                        ModelError::Layout(format!("{name} has shape {:?}", src.shape)).into(),
                    );
                }
                NamedTensor {
                    frozen: false,
                    ..src.clone()
                }
            }
        };
        tensors.push(t);
    }
    let mut out = Checkpoint {
        stage: Stage::Vision,
        tensors,
        ..ckpt.clone()
    };
    out.set_meta("surgery.reset_seed", seed);
    Ok(out)
}

/// Independently permute the flattened values of every weight matrix in
/// `scope`. Biases, norms and tensors outside the scope are untouched.
pub fn shuffle_weights(
    ckpt: &Checkpoint,
    scope: ShuffleScope,
    seed: u64,
) -> Result<Checkpoint, SurgeryError> {
    let kinds = layout(&ckpt.config, ckpt.stage);
    let mut out = ckpt.clone();
    for t in out.tensors.iter_mut() {
        let kind = kinds
            .iter()
            .find(|(n, _, _)| *n == t.name)
            .map(|(_, _, k)| *k)
            .ok_or_else(|| SurgeryError::MissingTensor(t.name.clone()))?;
        if block_index(&t.name).is_some() && scope.covers(kind) {
            t.data
                .shuffle(&mut rng::keyed(seed, name_key(&t.name), Lane::Surgery));
        }
    }
    out.set_meta(&format!("surgery.shuffle.{scope}"), seed);
    Ok(out)
}

/// Copy the blocks in `range` from `donor` into `target`. Everything else,
/// including embeddings and heads, keeps the target's values.
pub fn transfer_layers(
    target: &Checkpoint,
    donor: &Checkpoint,
    range: LayerRange,
) -> Result<Checkpoint, SurgeryError> {
    if target.config != donor.config {
        return Err(SurgeryError::ConfigMismatch(format!(
            "target {} vs donor {}",
            target.config.hash(),
            donor.config.hash()
        )));
    }
    let blocks = range.blocks(target.config.depth);
    let mut out = target.clone();
    for t in out.tensors.iter_mut() {
        if block_index(&t.name).is_some_and(|b| blocks.contains(&b)) {
            let src = donor
                .get(&t.name)
                .ok_or_else(|| SurgeryError::MissingTensor(t.name.clone()))?;
            t.data.clone_from(&src.data);
        }
    }
    out.set_meta(
        &format!("surgery.transfer.{range}"),
        format!("{}..{}", blocks.start, blocks.end),
    );
    Ok(out)
}

/// Set the stage tag. The tensors must already match that stage's layout.
pub fn retag(ckpt: &Checkpoint, stage: Stage) -> Result<Checkpoint, SurgeryError> {
    let want = layout(&ckpt.config, stage);
    let fits = want.len() == ckpt.tensors.len()
        && want
            .iter()
            .zip(&ckpt.tensors)
            .all(|((n, s, _), t)| *n == t.name && *s == t.shape);
    if !fits {
        return Err(ModelError::WrongStage {
            expected: stage,
            found: ckpt.stage,
        }
        .into());
    }
    Ok(Checkpoint {
        stage,
        ..ckpt.clone()
    })
}

/// Output of [`apply_plan`] with its provenance record.
#[derive(Debug, Clone)]
pub struct SurgeryOutcome {
    pub checkpoint: Checkpoint,
    pub provenance: KvDoc,
}

/// Run every step of `plan` in order. `donor` resolves a transfer step's
/// donor reference to a checkpoint.
pub fn apply_plan(
    input: &Checkpoint,
    plan: &SurgeryPlan,
    mut donor: impl FnMut(&str) -> Result<Checkpoint, SurgeryError>,
) -> Result<SurgeryOutcome, SurgeryError> {
    let mut prov = KvDoc::new();
    prov.push("input_hash", input.content_hash())
        .push("input_stage", input.stage)
        .push("depth", input.config.depth);
    for r in [LayerRange::First, LayerRange::Middle, LayerRange::Final] {
        let b = r.blocks(input.config.depth);
        prov.push(&format!("thirds.{r}"), format!("{}..{}", b.start, b.end));
    }
    let mut ckpt = input.clone();
    for step in &plan.steps {
        prov.push("step", step);
        ckpt = match step {
            SurgeryStep::ResetEmbeddingsAndHead { seed } => {
                reset_embeddings_and_head(&ckpt, *seed)?
            }
            SurgeryStep::ShuffleWeights { scope, seed } => shuffle_weights(&ckpt, *scope, *seed)?,
            SurgeryStep::TransferLayers { range, donor: name } => {
                let d = donor(name)?;
                prov.push("donor_hash", d.content_hash());
                transfer_layers(&ckpt, &d, *range)?
            }
            SurgeryStep::Retag(stage) => retag(&ckpt, *stage)?,
        };
    }
    ckpt.set_meta("surgery.input_hash", input.content_hash());
    ckpt.set_meta("surgery.plan", plan.render().trim_end().replace('\n', "; "));
    prov.push("output_hash", ckpt.content_hash());
    Ok(SurgeryOutcome {
        checkpoint: ckpt,
        provenance: prov,
    })
}
