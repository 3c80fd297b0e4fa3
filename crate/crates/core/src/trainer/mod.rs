//! Optimization loops for the masked-token warm-up and for image
//! classification, with schedules, metrics and checkpointing.

pub mod config;
pub mod grad;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::io;
use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::corpus::Corpus;
use crate::corpus::CorpusRecipe;
use crate::exec::Exec;
use crate::grammar::{GrammarError, MaskedExample, Symbol};
use crate::images::{augment, ImageSet};
use crate::kv::KvDoc;
use crate::model::{Checkpoint, Input, ModelError, ModelParams, Stage, TensorKind};
use crate::rng::{self, Lane};

pub use config::{budget_steps, TrainConfig};
pub use grad::{evaluate, loss_and_grad, BatchGrad, GradOptions, Targets};
pub use metrics::{RecordKind, RunMetrics, StepRecord};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::CosineSchedule;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty target set")]
    EmptyTargets,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFinite { step: u64, lr: f64, grad_norm: f64 },
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Where warm-up examples come from.
#[derive(Debug, Clone, Copy)]
pub enum WarmupData<'a> {
    /// Generated on the fly: step `s` consumes examples
    /// `s·batch .. (s+1)·batch` of the recipe.
    Stream(&'a CorpusRecipe),
    /// A stored corpus, cycled in order.
    Stored(&'a Corpus),
}

impl WarmupData<'_> {
    fn recipe(&self) -> &CorpusRecipe {
        match self {
            WarmupData::Stream(r) => r,
            WarmupData::Stored(c) => &c.recipe,
        }
    }

    fn batch(
        &self,
        start: u64,
        count: usize,
        exec: Exec,
    ) -> Result<Vec<MaskedExample>, GrammarError> {
        match self {
            WarmupData::Stream(r) => r.examples(start, count, exec),
            WarmupData::Stored(c) => {
                let n = c.examples.len() as u64;
                Ok((0..count as u64)
                    .map(|i| c.examples[((start + i) % n) as usize].clone())
                    .collect())
            }
        }
    }
}

/// Called after every optimizer step; returning `true` stops the run.
pub type StepHook<'a> = dyn FnMut(&StepRecord, &ModelParams<f32>) -> bool + 'a;

/// Execution settings shared by both loops.
pub struct RunOptions<'a> {
    pub exec: Exec,
    /// Checkpoints go to `<dir>/checkpoint`, metrics to `<dir>/metrics.jsonl`.
    pub out_dir: Option<PathBuf>,
    pub run_id: String,
    pub hook: Option<Box<StepHook<'a>>>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            exec: Exec::default(),
            out_dir: None,
            run_id: "run".into(),
            hook: None,
        }
    }
}

impl<'a> RunOptions<'a> {
    pub fn new(exec: Exec) -> Self {
        RunOptions {
            exec,
            ..Default::default()
        }
    }

    pub fn with_hook(
        mut self,
        hook: impl FnMut(&StepRecord, &ModelParams<f32>) -> bool + 'a,
    ) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }
}

/// Decay applies to matrices (projections, embeddings, heads) only.
fn decay_mask(params: &ModelParams<f32>) -> Vec<bool> {
    params
        .layout()
        .iter()
        .map(|(_, shape, kind)| {
            shape.len() >= 2 && !matches!(kind, TensorKind::Position | TensorKind::ClassToken)
        })
        .collect()
}

/// A forward overflow surfaces as the same abort as a non-finite loss.
fn overflow_abort(step: u64, lr: f64) -> impl FnOnce(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Model(ModelError::NumericalOverflow(_)) => TrainError::NonFinite {
            step: step + 1,
            lr,
            grad_norm: f64::NAN,
        },
        other => other,
    }
}

fn grad_norm(g: &ModelParams<f32>) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

struct Clock {
    start: Instant,
    reference: bool,
}

impl Clock {
    fn new(exec: Exec) -> Self {
        Clock {
            start: Instant::now(),
            reference: exec.is_reference(),
        }
    }

    fn seconds(&self) -> f64 {
        if self.reference {
            0.0
        } else {
            self.start.elapsed().as_secs_f64()
        }
    }
}

fn finish(
    ckpt: &Checkpoint,
    params: &ModelParams<f32>,
    step: u64,
    meta: &[(String, String)],
) -> Checkpoint {
    let frozen: Vec<&str> = ckpt.frozen_names();
    let mut out = Checkpoint {
        config: ckpt.config.clone(),
        stage: ckpt.stage,
        step,
        seed: ckpt.seed,
        tensors: params.to_named(|n| frozen.contains(&n)),
        meta: ckpt.meta.clone(),
    };
    for (k, v) in meta {
        out.set_meta(k, v);
    }
    out
}

fn save(out: &Checkpoint, metrics: &RunMetrics, opts: &RunOptions<'_>) -> Result<(), TrainError> {
    if let Some(dir) = &opts.out_dir {
        out.write(&dir.join("checkpoint"))?;
        metrics.write(&dir.join("metrics.jsonl"))?;
    }
    Ok(())
}

/// Masked-token warm-up. Only block, final-norm and head tensors are
/// updated; the frozen token and positional tables are never touched.
pub fn train_warmup(
    ckpt: &Checkpoint,
    data: WarmupData<'_>,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<(Checkpoint, RunMetrics), TrainError> {
    ckpt.require_stage(Stage::Warmup)?;
    if cfg.stage != Stage::Warmup {
        return Err(TrainError::Config("expected a warm-up config".into()));
    }
    cfg.validate().map_err(TrainError::Config)?;
    for name in ["tok_embed", "pos_embed"] {
        if !ckpt.get(name).is_some_and(|t| t.frozen) {
            return Err(TrainError::Config(format!("{name} must be flagged frozen")));
        }
    }
    let spec = data.recipe().spec;
    spec.validate()?;
    let mc = &ckpt.config;
    if spec.seq_len != mc.seq_len || spec.vocab_size != mc.vocab_size {
        return Err(TrainError::Shape(format!(
            "grammar (len {}, vocab {}) does not fit model (len {}, vocab {})",
            spec.seq_len, spec.vocab_size, mc.seq_len, mc.vocab_size
        )));
    }

    let mut params = ModelParams::<f32>::from_checkpoint(ckpt)?;
    let frozen: Vec<bool> = ckpt.tensors.iter().map(|t| t.frozen).collect();
    let mut opt = AdamW::new(&params, cfg.optimizer(), frozen, decay_mask(&params));
    let sched = cfg.schedule(0);
    let mut hdr = KvDoc::new();
    mc.to_kv(&mut hdr);
    cfg.to_kv(&mut hdr);
    hdr.push("data", data.recipe().config_hash(0));
    let mut metrics = RunMetrics::new(
        &opts.run_id,
        Stage::Warmup,
        crate::kv::short_hash(hdr.render().as_bytes()),
    );
    let meta = vec![
        ("train.config_hash".to_string(), cfg.hash()),
        ("train.data".to_string(), data.recipe().config_hash(0)),
    ];
    let clock = Clock::new(opts.exec);
    let b = cfg.batch_size;
    let grad_opts = GradOptions {
        skip_input: true,
        label_smoothing: 0.0,
    };

    let mut step = 0u64;
    while (step as usize) < cfg.steps {
        let batch = data.batch(step * b as u64, b, opts.exec)?;
        let ids: Vec<Symbol> = batch
            .iter()
            .flat_map(|e| e.input_tokens.iter().copied())
            .collect();
        let targets: Vec<Vec<(usize, Symbol)>> = batch.iter().map(|e| e.targets.clone()).collect();
        let lr = sched.lr(step as usize);
        let g = loss_and_grad(
            &params,
            Input::Tokens {
                ids: &ids,
                batch: b,
            },
            Targets::Masked(&targets),
            grad_opts,
            opts.exec,
        )
        .map_err(overflow_abort(step, lr))?;
        let gn = grad_norm(&g.grads);
        if !g.loss.is_finite() || !gn.is_finite() {
            return Err(TrainError::NonFinite {
                step: step + 1,
                lr,
                grad_norm: gn,
            });
        }
        opt.apply(&mut params, &g.grads, lr);
        step += 1;
        let rec = StepRecord {
            kind: RecordKind::Train,
            step,
            lr,
            loss: g.loss,
            accuracy: g.accuracy(),
            wall_clock: clock.seconds(),
        };
        metrics.records.push(rec);
        if cfg.checkpoint_every > 0 && (step as usize).is_multiple_of(cfg.checkpoint_every) {
            save(
                &finish(ckpt, &params, ckpt.step + step, &meta),
                &metrics,
                &opts,
            )?;
        }
        if let Some(h) = opts.hook.as_mut() {
            if h(&rec, &params) {
                break;
            }
        }
    }
    let out = if step == 0 {
        ckpt.clone()
    } else {
        finish(ckpt, &params, ckpt.step + step, &meta)
    };
    save(&out, &metrics, &opts)?;
    Ok((out, metrics))
}

/// Top-1 loss and accuracy of `params` on `set`.
pub fn evaluate_images(
    params: &ModelParams<f32>,
    set: &ImageSet,
    exec: Exec,
) -> Result<(f64, f64), TrainError> {
    evaluate(
        params,
        Input::Images {
            pixels: &set.pixels,
            batch: set.len(),
        },
        Targets::Labels(&set.labels),
        exec,
    )
}

fn check_images(ckpt: &Checkpoint, set: &ImageSet) -> Result<(), TrainError> {
    let c = &ckpt.config;
    if set.channels != c.channels || set.size != c.image_size || set.num_classes > c.num_classes {
        return Err(TrainError::Shape(format!(
            "images {}×{}×{} with {} classes do not fit model {}×{}×{} with {} classes",
            set.channels,
            set.size,
            set.size,
            set.num_classes,
            c.channels,
            c.image_size,
            c.image_size,
            c.num_classes
        )));
    }
    Ok(())
}

/// Supervised classification with every tensor trainable. Each epoch
/// visits the training set in a seeded random order; augmentation is a
/// random flip and padded crop per image.
pub fn train_vision(
    ckpt: &Checkpoint,
    train: &ImageSet,
    test: Option<&ImageSet>,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<(Checkpoint, RunMetrics), TrainError> {
    ckpt.require_stage(Stage::Vision)?;
    if cfg.stage != Stage::Vision {
        return Err(TrainError::Config("expected a vision config".into()));
    }
    cfg.validate().map_err(TrainError::Config)?;
    if train.is_empty() {
        return Err(TrainError::EmptyTargets);
    }
    check_images(ckpt, train)?;
    if let Some(t) = test {
        check_images(ckpt, t)?;
    }

    let mut params = ModelParams::<f32>::from_checkpoint(ckpt)?;
    let frozen = vec![false; params.tensors().len()];
    let mut opt = AdamW::new(&params, cfg.optimizer(), frozen, decay_mask(&params));
    let n = train.len();
    let b = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(b);
    let sched = cfg.schedule(per_epoch);
    let mut hdr = KvDoc::new();
    ckpt.config.to_kv(&mut hdr);
    cfg.to_kv(&mut hdr);
    hdr.push("data", train.config_hash());
    let mut metrics = RunMetrics::new(
        &opts.run_id,
        Stage::Vision,
        crate::kv::short_hash(hdr.render().as_bytes()),
    );
    let augmentation = if cfg.augment { "flip+crop" } else { "none" };
    let meta = vec![
        ("train.config_hash".to_string(), cfg.hash()),
        ("train.data".to_string(), train.config_hash()),
        ("train.augmentation".to_string(), augmentation.to_string()),
    ];
    let clock = Clock::new(opts.exec);
    let img_len = train.image_len();
    let grad_opts = GradOptions {
        skip_input: false,
        label_smoothing: cfg.label_smoothing,
    };

    let mut step = 0u64;
    let mut stop = false;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng::keyed(cfg.seed, epoch as u64, Lane::Batch));
        }
        for chunk in order.chunks(b) {
            let mut pixels = vec![0.0f32; chunk.len() * img_len];
            let fill = |j: usize, out: &mut [f32]| {
                let src = train.image(chunk[j]);
                if cfg.augment {
                    let key = step * b as u64 + j as u64;
                    augment(
                        src,
                        train.channels,
                        train.size,
                        &mut rng::keyed(cfg.seed, key, Lane::Augment),
                        out,
                    );
                } else {
                    out.copy_from_slice(src);
                }
            };
            opts.exec.for_each_chunk_mut(&mut pixels, img_len, fill);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let lr = sched.lr(step as usize);
            let g = loss_and_grad(
                &params,
                Input::Images {
                    pixels: &pixels,
                    batch: chunk.len(),
                },
                Targets::Labels(&labels),
                grad_opts,
                opts.exec,
            )
            .map_err(overflow_abort(step, lr))?;
            let gn = grad_norm(&g.grads);
            if !g.loss.is_finite() || !gn.is_finite() {
                return Err(TrainError::NonFinite {
                    step: step + 1,
                    lr,
                    grad_norm: gn,
                });
            }
            opt.apply(&mut params, &g.grads, lr);
            step += 1;
            let rec = StepRecord {
                kind: RecordKind::Train,
                step,
                lr,
                loss: g.loss,
                accuracy: g.accuracy(),
                wall_clock: clock.seconds(),
            };
            metrics.records.push(rec);
            if cfg.checkpoint_every > 0 && (step as usize).is_multiple_of(cfg.checkpoint_every) {
                save(
                    &finish(ckpt, &params, ckpt.step + step, &meta),
                    &metrics,
                    &opts,
                )?;
            }
            if let Some(h) = opts.hook.as_mut() {
                if h(&rec, &params) {
                    stop = true;
                    break;
                }
            }
        }
        let last = epoch + 1 == cfg.epochs || stop;
        if let Some(t) = test {
            if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
                let (loss, acc) = evaluate_images(&params, t, opts.exec)?;
                metrics.records.push(StepRecord {
                    kind: RecordKind::Eval,
                    step,
                    lr: sched.lr(step as usize),
                    loss,
                    accuracy: acc,
                    wall_clock: clock.seconds(),
                });
            }
        }
        if stop {
            break 'epochs;
        }
    }
    let out = if step == 0 {
        ckpt.clone()
    } else {
        finish(ckpt, &params, ckpt.step + step, &meta)
    };
    save(&out, &metrics, &opts)?;
    Ok((out, metrics))
}
