//! Forward and backward passes of the pre-norm transformer encoder.
//!
//! A pass processes a small batch as one `(batch·len) × width` residual
//! matrix. Linear layers run as single GEMMs over all rows; attention runs
//! per `(example, head)` on strided column blocks of the Q/K/V matrices.

use super::config::{ModelConfig, Stage};
use super::linalg::{add_bias, add_col_sums, gemm, matmul, matmul_nt, matmul_tn, Real, View};
use super::params::{BlockParams, InputParams, Linear, ModelParams, Norm};
use super::ModelError;
use crate::grammar::Symbol;

pub const LN_EPS: f64 = 1e-6;

/// Model input for one pass.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    /// `batch × seq_len` symbol ids; id `vocab_size` is the mask.
    Tokens { ids: &'a [Symbol], batch: usize },
    /// `batch × channels × size × size` pixels.
    Images { pixels: &'a [f32], batch: usize },
}

impl Input<'_> {
    pub fn batch(&self) -> usize {
        match *self {
            Input::Tokens { batch, .. } | Input::Images { batch, .. } => batch,
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            Input::Tokens { .. } => Stage::Warmup,
            Input::Images { .. } => Stage::Vision,
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    n1: Vec<T>,
    ln1: NormCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `batch × heads × len × len` attention weights.
    probs: Vec<T>,
    concat: Vec<T>,
    n2: Vec<T>,
    ln2: NormCache<T>,
    h1: Vec<T>,
    g: Vec<T>,
}

#[derive(Debug, Clone)]
enum InputCache {
    Tokens(Vec<Symbol>),
    /// `(batch·patches) × patch_dim`.
    Patches(Vec<f64>),
}

/// Everything the backward pass needs, plus the logits.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub batch: usize,
    pub len: usize,
    pub stage: Stage,
    input: InputCache,
    blocks: Vec<BlockCache<T>>,
    final_ln: NormCache<T>,
    final_out: Vec<T>,
    /// Warm-up: `batch × len × vocab_size`. Vision: `batch × num_classes`.
    pub logits: Vec<T>,
    pub classes: usize,
}

impl<T: Real> ForwardPass<T> {
    /// Attention weights of `block` for `(example, head)`, `len × len`.
    pub fn attention(&self, block: usize, example: usize, head: usize, heads: usize) -> &[T] {
        let l = self.len;
        let off = (example * heads + head) * l * l;
        &self.blocks[block].probs[off..off + l * l]
    }
}

fn layer_norm<T: Real>(x: &[T], p: &Norm<T>, d: usize) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / d;
    let eps = T::lit(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * p.weight[j] + p.bias[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Accumulate parameter grads into `gp`; add input grad into `dx`.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &NormCache<T>,
    p: &Norm<T>,
    gp: &mut Norm<T>,
    dx: &mut [T],
    d: usize,
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            gp.weight[j] += dyr[j] * xh[j];
            gp.bias[j] += dyr[j];
            dxhat[j] = dyr[j] * p.weight[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

fn linear<T: Real>(x: &[T], p: &Linear<T>) -> Vec<T> {
    let rows = x.len() / p.fan_in;
    let mut y = vec![T::zero(); rows * p.fan_out];
    matmul(x, &p.weight, &mut y, rows, p.fan_in, p.fan_out, false);
    add_bias(&mut y, &p.bias);
    y
}

/// Accumulate `dW += xᵀ dy`, `db += Σ dy`; return `dy Wᵀ` when asked.
fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    p: &Linear<T>,
    gp: &mut Linear<T>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let rows = dy.len() / p.fan_out;
    matmul_tn(x, dy, &mut gp.weight, p.fan_in, rows, p.fan_out, true);
    add_col_sums(dy, &mut gp.bias);
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * p.fan_in];
        matmul_nt(dy, &p.weight, &mut dx, rows, p.fan_out, p.fan_in, false);
        dx
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn softmax_rows<T: Real>(s: &mut [T], n: usize) {
    for row in s.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

fn block_forward<T: Real>(
    p: &BlockParams<T>,
    x: &mut [T],
    batch: usize,
    len: usize,
    heads: usize,
) -> BlockCache<T> {
    let d = p.q.fan_in;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let (n1, ln1) = layer_norm(x, &p.norm1, d);
    let q = linear(&n1, &p.q);
    let k = linear(&n1, &p.k);
    let v = linear(&n1, &p.v);
    let mut probs = vec![T::zero(); batch * heads * len * len];
    let mut concat = vec![T::zero(); batch * len * d];
    for b in 0..batch {
        for h in 0..heads {
            let head = View::block(b * len, len, h * dh, dh, d);
            let s = &mut probs[(b * heads + h) * len * len..][..len * len];
            gemm(
                scale,
                &q,
                head,
                &k,
                head.t(),
                T::zero(),
                s,
                View::dense(len, len),
            );
            softmax_rows(s, len);
            gemm(
                T::one(),
                s,
                View::dense(len, len),
                &v,
                head,
                T::zero(),
                &mut concat,
                head,
            );
        }
    }
    let a = linear(&concat, &p.out);
    for (xi, ai) in x.iter_mut().zip(&a) {
        *xi += *ai;
    }

    let (n2, ln2) = layer_norm(x, &p.norm2, d);
    let h1 = linear(&n2, &p.fc1);
    let g: Vec<T> = h1.iter().map(|&z| gelu(z)).collect();
    let m = linear(&g, &p.fc2);
    for (xi, mi) in x.iter_mut().zip(&m) {
        *xi += *mi;
    }
    BlockCache {
        n1,
        ln1,
        q,
        k,
        v,
        probs,
        concat,
        n2,
        ln2,
        h1,
        g,
    }
}

/// `dx` holds the gradient w.r.t. the block output on entry and w.r.t. the
/// block input on return.
fn block_backward<T: Real>(
    p: &BlockParams<T>,
    c: &BlockCache<T>,
    gp: &mut BlockParams<T>,
    dx: &mut [T],
    batch: usize,
    len: usize,
    heads: usize,
) {
    let d = p.q.fan_in;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    // MLP branch.
    let dg = linear_backward(&c.g, dx, &p.fc2, &mut gp.fc2, true).unwrap();
    let dh1: Vec<T> = dg
        .iter()
        .zip(&c.h1)
        .map(|(&g, &z)| g * gelu_grad(z))
        .collect();
    let dn2 = linear_backward(&c.n2, &dh1, &p.fc1, &mut gp.fc1, true).unwrap();
    layer_norm_backward(&dn2, &c.ln2, &p.norm2, &mut gp.norm2, dx, d);

    // Attention branch.
    let dconcat = linear_backward(&c.concat, dx, &p.out, &mut gp.out, true).unwrap();
    let mut dq = vec![T::zero(); dx.len()];
    let mut dk = vec![T::zero(); dx.len()];
    let mut dv = vec![T::zero(); dx.len()];
    let mut dp = vec![T::zero(); len * len];
    let sq = View::dense(len, len);
    for b in 0..batch {
        for h in 0..heads {
            let head = View::block(b * len, len, h * dh, dh, d);
            let pr = &c.probs[(b * heads + h) * len * len..][..len * len];
            gemm(
                T::one(),
                &dconcat,
                head,
                &c.v,
                head.t(),
                T::zero(),
                &mut dp,
                sq,
            );
            gemm(
                T::one(),
                pr,
                sq.t(),
                &dconcat,
                head,
                T::zero(),
                &mut dv,
                head,
            );
            for (prow, dprow) in pr.chunks_exact(len).zip(dp.chunks_exact_mut(len)) {
                let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (ds, &pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot);
                }
            }
            gemm(scale, &dp, sq, &c.k, head, T::zero(), &mut dq, head);
            gemm(scale, &dp, sq.t(), &c.q, head, T::zero(), &mut dk, head);
        }
    }
    let mut dn1 = linear_backward(&c.n1, &dq, &p.q, &mut gp.q, true).unwrap();
    let rows = dx.len() / d;
    linear_backward(&c.n1, &dk, &p.k, &mut gp.k, false);
    matmul_nt(&dk, &p.k.weight, &mut dn1, rows, d, d, true);
    linear_backward(&c.n1, &dv, &p.v, &mut gp.v, false);
    matmul_nt(&dv, &p.v.weight, &mut dn1, rows, d, d, true);
    layer_norm_backward(&dn1, &c.ln1, &p.norm1, &mut gp.norm1, dx, d);
}

/// `(batch·patches) × patch_dim` matrix of flattened `(c, py, px)` patches,
/// patches in row-major grid order.
fn patchify(pixels: &[f32], batch: usize, cfg: &ModelConfig) -> Vec<f64> {
    let (c, s, p, g) = (cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let pd = cfg.patch_dim();
    let np = cfg.num_patches();
    let mut out = vec![0.0; batch * np * pd];
    for b in 0..batch {
        let img = &pixels[b * c * s * s..(b + 1) * c * s * s];
        for gy in 0..g {
            for gx in 0..g {
                let row = &mut out[(b * np + gy * g + gx) * pd..][..pd];
                let mut i = 0;
                for ch in 0..c {
                    for py in 0..p {
                        let base = ch * s * s + (gy * p + py) * s + gx * p;
                        for px in 0..p {
                            row[i] = img[base + px] as f64;
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_finite<T: Real>(v: &[T], what: &str) -> Result<(), ModelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NumericalOverflow(format!(
            "non-finite values in {what}"
        )))
    }
}

/// Run the model on `input`.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    input: Input<'_>,
) -> Result<ForwardPass<T>, ModelError> {
    let cfg = &params.config;
    let stage = params.stage();
    if input.stage() != stage {
        return Err(ModelError::WrongStage {
            expected: input.stage(),
            found: stage,
        });
    }
    let d = cfg.width;
    let len = cfg.tokens(stage);
    let batch = input.batch();
    let mut x = vec![T::zero(); batch * len * d];

    let input_cache = match (input, &params.input) {
        (Input::Tokens { ids, .. }, InputParams::Tokens { embed }) => {
            if ids.len() != batch * len {
                return Err(ModelError::Shape(format!(
                    "token batch has {} ids, expected {batch} x {len}",
                    ids.len()
                )));
            }
            for (i, &id) in ids.iter().enumerate() {
                if id as usize > cfg.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        limit: cfg.vocab_size + 1,
                    });
                }
                let l = i % len;
                let e = &embed[id as usize * d..][..d];
                let pp = &params.pos[l * d..][..d];
                for (j, xv) in x[i * d..(i + 1) * d].iter_mut().enumerate() {
                    *xv = e[j] + pp[j];
                }
            }
            InputCache::Tokens(ids.to_vec())
        }
        (Input::Images { pixels, .. }, InputParams::Patches { proj, cls }) => {
            let want = batch * cfg.channels * cfg.image_size * cfg.image_size;
            if pixels.len() != want {
                return Err(ModelError::Shape(format!(
                    "image batch has {} values, expected {want}",
                    pixels.len()
                )));
            }
            let patches = patchify(pixels, batch, cfg);
            let pt: Vec<T> = patches.iter().map(|&v| T::from_f64(v).unwrap()).collect();
            let xp = linear(&pt, proj);
            let np = cfg.num_patches();
            for b in 0..batch {
                for l in 0..len {
                    let src: &[T] = if l == 0 {
                        cls
                    } else {
                        &xp[(b * np + l - 1) * d..][..d]
                    };
                    let pp = &params.pos[l * d..][..d];
                    for (j, xv) in x[(b * len + l) * d..][..d].iter_mut().enumerate() {
                        *xv = src[j] + pp[j];
                    }
                }
            }
            InputCache::Patches(patches)
        }
        _ => unreachable!("stage checked above"),
    };

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        blocks.push(block_forward(bp, &mut x, batch, len, cfg.heads));
    }
    let (final_out, final_ln) = layer_norm(&x, &params.norm, d);
    let logits = match stage {
        Stage::Warmup => linear(&final_out, &params.head),
        Stage::Vision => {
            let cls_rows: Vec<T> = (0..batch)
                .flat_map(|b| final_out[b * len * d..][..d].iter().copied())
                .collect();
            linear(&cls_rows, &params.head)
        }
    };
    check_finite(&logits, "logits")?;
    Ok(ForwardPass {
        batch,
        len,
        stage,
        input: input_cache,
        blocks,
        final_ln,
        final_out,
        logits,
        classes: params.head.fan_out,
    })
}

/// Which gradients to compute.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    /// Skip token-table and positional gradients (frozen during warm-up).
    pub skip_input: bool,
}

/// Accumulate gradients of a scalar loss into `grads`, given its gradient
/// w.r.t. the logits of `pass`.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    pass: &ForwardPass<T>,
    dlogits: &[T],
    grads: &mut ModelParams<T>,
    opts: BackwardOptions,
) -> Result<(), ModelError> {
    if dlogits.len() != pass.logits.len() {
        return Err(ModelError::Shape(format!(
            "logit gradient has {} values, expected {}",
            dlogits.len(),
            pass.logits.len()
        )));
    }
    if grads.stage() != pass.stage || params.stage() != pass.stage {
        return Err(ModelError::WrongStage {
            expected: pass.stage,
            found: grads.stage(),
        });
    }
    let cfg = &params.config;
    let (batch, len, d) = (pass.batch, pass.len, cfg.width);

    let mut dfo = match pass.stage {
        Stage::Warmup => linear_backward(
            &pass.final_out,
            dlogits,
            &params.head,
            &mut grads.head,
            true,
        )
        .unwrap(),
        Stage::Vision => {
            let cls_rows: Vec<T> = (0..batch)
                .flat_map(|b| pass.final_out[b * len * d..][..d].iter().copied())
                .collect();
            let dcls =
                linear_backward(&cls_rows, dlogits, &params.head, &mut grads.head, true).unwrap();
            let mut full = vec![T::zero(); batch * len * d];
            for b in 0..batch {
                full[b * len * d..][..d].copy_from_slice(&dcls[b * d..(b + 1) * d]);
            }
            full
        }
    };
    let mut dx = vec![T::zero(); dfo.len()];
    layer_norm_backward(
        &dfo,
        &pass.final_ln,
        &params.norm,
        &mut grads.norm,
        &mut dx,
        d,
    );
    dfo.clear();

    for ((bp, cache), gb) in params
        .blocks
        .iter()
        .zip(&pass.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        block_backward(bp, cache, gb, &mut dx, batch, len, cfg.heads);
    }
    check_finite(&dx, "input gradient")?;

    match (&pass.input, &mut grads.input) {
        (InputCache::Tokens(ids), InputParams::Tokens { embed }) => {
            if !opts.skip_input {
                for (i, &id) in ids.iter().enumerate() {
                    let l = i % len;
                    let row = &dx[i * d..(i + 1) * d];
                    for j in 0..d {
                        embed[id as usize * d + j] += row[j];
                        grads.pos[l * d + j] += row[j];
                    }
                }
            }
        }
        (InputCache::Patches(patches), InputParams::Patches { proj, cls }) => {
            if !opts.skip_input {
                let np = cfg.num_patches();
                let mut dxp = vec![T::zero(); batch * np * d];
                for b in 0..batch {
                    for l in 0..len {
                        let row = &dx[(b * len + l) * d..][..d];
                        for (g, r) in grads.pos[l * d..][..d].iter_mut().zip(row) {
                            *g += *r;
                        }
                        if l == 0 {
                            for j in 0..d {
                                cls[j] += row[j];
                            }
                        } else {
                            dxp[(b * np + l - 1) * d..][..d].copy_from_slice(row);
                        }
                    }
                }
                let pt: Vec<T> = patches.iter().map(|&v| T::from_f64(v).unwrap()).collect();
                let pd = cfg.patch_dim();
                matmul_tn(&pt, &dxp, &mut proj.weight, pd, batch * np, d, true);
                add_col_sums(&dxp, &mut proj.bias);
            }
        }
        _ => unreachable!("stage checked above"),
    }
    Ok(())
}
