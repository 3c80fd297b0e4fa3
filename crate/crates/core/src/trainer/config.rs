//! Training hyperparameters for both stages.

use crate::kv::{short_hash, KvDoc, KvError};
use crate::model::Stage;

use super::optim::AdamWConfig;
use super::schedule::CosineSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    /// Optimizer steps (warm-up stage).
    pub steps: usize,
    pub warmup_steps: usize,
    /// Passes over the training set (vision stage).
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Evaluate every this many epochs (vision) or steps (warm-up); 0 never.
    pub eval_every: usize,
    pub label_smoothing: f64,
    pub augment: bool,
}

impl TrainConfig {
    pub fn warmup_default() -> Self {
        TrainConfig {
            stage: Stage::Warmup,
            batch_size: 256,
            steps: 15_000,
            warmup_steps: 1_000,
            epochs: 0,
            warmup_epochs: 0,
            lr: 2e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            label_smoothing: 0.0,
            augment: false,
        }
    }

    pub fn vision_default() -> Self {
        TrainConfig {
            stage: Stage::Vision,
            batch_size: 512,
            steps: 0,
            warmup_steps: 0,
            epochs: 300,
            warmup_epochs: 50,
            eval_every: 1,
            augment: true,
            ..Self::warmup_default()
        }
    }

    pub fn default_for(stage: Stage) -> Self {
        match stage {
            Stage::Warmup => Self::warmup_default(),
            Stage::Vision => Self::vision_default(),
        }
    }

    /// Scale the vision schedule to `epochs`, keeping warm-up at one sixth.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.warmup_epochs = epochs / 6;
        self
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Schedule over optimizer steps; `steps_per_epoch` only matters for
    /// the vision stage.
    pub fn schedule(&self, steps_per_epoch: usize) -> CosineSchedule {
        match self.stage {
            Stage::Warmup => CosineSchedule {
                peak: self.lr,
                warmup_steps: self.warmup_steps,
                total_steps: self.steps,
            },
            Stage::Vision => CosineSchedule {
                peak: self.lr,
                warmup_steps: self.warmup_epochs * steps_per_epoch,
                total_steps: self.epochs * steps_per_epoch,
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(format!("bad learning rate {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err("label_smoothing must lie in [0, 1)".into());
        }
        match self.stage {
            Stage::Warmup if self.warmup_steps > self.steps && self.steps > 0 => {
                Err("warmup_steps exceeds steps".into())
            }
            Stage::Vision if self.warmup_epochs > self.epochs => {
                Err("warmup_epochs exceeds epochs".into())
            }
            _ => Ok(()),
        }
    }

    pub fn to_kv(&self, d: &mut KvDoc) {
        d.push("train.stage", self.stage)
            .push("train.batch_size", self.batch_size)
            .push("train.steps", self.steps)
            .push("train.warmup_steps", self.warmup_steps)
            .push("train.epochs", self.epochs)
            .push("train.warmup_epochs", self.warmup_epochs)
            .push("train.lr", self.lr)
            .push("train.weight_decay", self.weight_decay)
            .push("train.beta1", self.beta1)
            .push("train.beta2", self.beta2)
            .push("train.eps", self.eps)
            .push("train.seed", self.seed)
            .push("train.checkpoint_every", self.checkpoint_every)
            .push("train.eval_every", self.eval_every)
            .push("train.label_smoothing", self.label_smoothing)
            .push("train.augment", self.augment);
    }

    /// Defaults for `stage`, overridden by any `train.*` keys present.
    /// Keys may also be given without the `train.` prefix.
    pub fn from_kv(stage: Stage, d: &KvDoc) -> Result<Self, KvError> {
        fn set<T: std::str::FromStr>(d: &KvDoc, key: &str, slot: &mut T) -> Result<(), KvError> {
            let long = format!("train.{key}");
            if let Some(v) = d.parse_opt(&long)? {
                *slot = v;
            } else if let Some(v) = d.parse_opt(key)? {
                *slot = v;
            }
            Ok(())
        }
        let mut c = Self::default_for(stage);
        set(d, "batch_size", &mut c.batch_size)?;
        set(d, "steps", &mut c.steps)?;
        set(d, "warmup_steps", &mut c.warmup_steps)?;
        set(d, "epochs", &mut c.epochs)?;
        set(d, "warmup_epochs", &mut c.warmup_epochs)?;
        set(d, "lr", &mut c.lr)?;
        set(d, "weight_decay", &mut c.weight_decay)?;
        set(d, "beta1", &mut c.beta1)?;
        set(d, "beta2", &mut c.beta2)?;
        set(d, "eps", &mut c.eps)?;
        set(d, "seed", &mut c.seed)?;
        set(d, "checkpoint_every", &mut c.checkpoint_every)?;
        set(d, "eval_every", &mut c.eval_every)?;
        set(d, "label_smoothing", &mut c.label_smoothing)?;
        set(d, "augment", &mut c.augment)?;
        Ok(c)
    }

    pub fn hash(&self) -> String {
        let mut d = KvDoc::new();
        self.to_kv(&mut d);
        short_hash(d.render().as_bytes())
    }
}

/// Warm-up steps whose examples amount to `fraction` of a vision budget of
/// `vision_examples` images (rounded up, at least one step).
pub fn budget_steps(vision_examples: u64, fraction: f64, batch_size: usize) -> usize {
    let examples = (vision_examples as f64 * fraction).ceil() as u64;
    (examples.div_ceil(batch_size as u64) as usize).max(1)
}
