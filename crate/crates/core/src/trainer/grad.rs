//! Batch loss and gradient with a deterministic reduction order.
//!
//! A batch is split into fixed-size chunks. Chunks may run in parallel but
//! their gradients are summed strictly in chunk order, so parallel and
//! reference execution give bit-identical results.

use super::loss::{class_loss_scaled, masked_loss_scaled};
use super::TrainError;
use crate::exec::Exec;
use crate::grammar::Symbol;
use crate::model::{backward, forward, BackwardOptions, Input, ModelParams, Real};

/// Examples per chunk. Fixed so the reduction order never depends on
/// thread count.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Per example `(position, symbol)` pairs.
    Masked(&'a [Vec<(usize, Symbol)>]),
    Labels(&'a [usize]),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradOptions {
    pub skip_input: bool,
    pub label_smoothing: f64,
}

#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub grads: ModelParams<T>,
}

impl<T> BatchGrad<T> {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

fn slice_input<'a>(input: Input<'a>, start: usize, end: usize, per: usize) -> Input<'a> {
    match input {
        Input::Tokens { ids, .. } => Input::Tokens {
            ids: &ids[start * per..end * per],
            batch: end - start,
        },
        Input::Images { pixels, .. } => Input::Images {
            pixels: &pixels[start * per..end * per],
            batch: end - start,
        },
    }
}

fn per_example(input: &Input<'_>) -> usize {
    match input {
        Input::Tokens { ids, batch } => ids.len() / (*batch).max(1),
        Input::Images { pixels, batch } => pixels.len() / (*batch).max(1),
    }
}

/// Mean loss over the batch's targets and its gradient w.r.t. every
/// parameter (input adapters excluded when `opts.skip_input`).
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    input: Input<'_>,
    targets: Targets<'_>,
    opts: GradOptions,
    exec: Exec,
) -> Result<BatchGrad<T>, TrainError> {
    let batch = input.batch();
    let n_targets = match targets {
        Targets::Masked(t) => {
            if t.len() != batch {
                return Err(TrainError::Shape("target count differs from batch".into()));
            }
            t.iter().map(Vec::len).sum()
        }
        Targets::Labels(l) => {
            if l.len() != batch {
                return Err(TrainError::Shape("label count differs from batch".into()));
            }
            l.len()
        }
    };
    if n_targets == 0 {
        return Err(TrainError::EmptyTargets);
    }
    let scale = T::one() / T::from_usize(n_targets).unwrap();
    let per = per_example(&input);
    let chunks = batch.div_ceil(CHUNK);
    let cfg = &params.config;
    let len = cfg.tokens(params.stage());

    let run_chunk = |c: usize| -> Result<(f64, usize, ModelParams<T>), TrainError> {
        let (s, e) = (c * CHUNK, ((c + 1) * CHUNK).min(batch));
        let pass = forward(params, slice_input(input, s, e, per))?;
        let out = match targets {
            Targets::Masked(t) => {
                masked_loss_scaled(&pass.logits, len, pass.classes, &t[s..e], scale)?
            }
            Targets::Labels(l) => class_loss_scaled(
                &pass.logits,
                pass.classes,
                &l[s..e],
                opts.label_smoothing,
                scale,
            )?,
        };
        let mut g = params.zeros_like();
        backward(
            params,
            &pass,
            &out.dlogits,
            &mut g,
            BackwardOptions {
                skip_input: opts.skip_input,
            },
        )?;
        Ok((out.loss_sum, out.correct, g))
    };

    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut total: Option<ModelParams<T>> = None;
    let mut absorb = |r: (f64, usize, ModelParams<T>)| {
        loss_sum += r.0;
        correct += r.1;
        match &mut total {
            None => total = Some(r.2),
            Some(t) => t.add_assign(&r.2),
        }
    };
    if exec.is_reference() {
        for c in 0..chunks {
            absorb(run_chunk(c)?);
        }
    } else {
        for r in exec.map_indexed(chunks, run_chunk) {
            absorb(r?);
        }
    }
    Ok(BatchGrad {
        loss: loss_sum / n_targets as f64,
        correct,
        count: n_targets,
        grads: total.expect("nonempty batch"),
    })
}

/// Forward-only evaluation: `(mean loss, accuracy)`.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    input: Input<'_>,
    targets: Targets<'_>,
    exec: Exec,
) -> Result<(f64, f64), TrainError> {
    let batch = input.batch();
    let per = per_example(&input);
    let chunks = batch.div_ceil(CHUNK);
    let len = params.config.tokens(params.stage());
    let res = exec.map_indexed(chunks, |c| -> Result<(f64, usize, usize), TrainError> {
        let (s, e) = (c * CHUNK, ((c + 1) * CHUNK).min(batch));
        let pass = forward(params, slice_input(input, s, e, per))?;
        let out = match targets {
            Targets::Masked(t) => {
                masked_loss_scaled(&pass.logits, len, pass.classes, &t[s..e], T::one())?
            }
            Targets::Labels(l) => {
                class_loss_scaled(&pass.logits, pass.classes, &l[s..e], 0.0, T::one())?
            }
        };
        Ok((out.loss_sum, out.correct, out.count))
    });
    let (mut l, mut c, mut n) = (0.0, 0, 0);
    for r in res {
        let (a, b, k) = r?;
        l += a;
        c += b;
        n += k;
    }
    Ok((l / n as f64, c as f64 / n as f64))
}
