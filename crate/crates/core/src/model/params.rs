//! Typed parameter sets used by the compute path, and their mapping onto
//! named checkpoint tensors.

use super::checkpoint::{Checkpoint, NamedTensor};
use super::config::{ModelConfig, Stage};
use super::linalg::Real;
use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `fan_in × fan_out`, row-major; `y = x W + b`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: vec![T::zero(); fan_in * fan_out],
            bias: vec![T::zero(); fan_out],
            fan_in,
            fan_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Norm<T> {
    pub fn identity(width: usize) -> Self {
        Norm {
            weight: vec![T::one(); width],
            bias: vec![T::zero(); width],
        }
    }

    pub fn zeros(width: usize) -> Self {
        Norm {
            weight: vec![T::zero(); width],
            bias: vec![T::zero(); width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: Norm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> BlockParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        BlockParams {
            norm1: Norm::zeros(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            out: Linear::zeros(d, d),
            norm2: Norm::zeros(d),
            fc1: Linear::zeros(d, cfg.hidden()),
            fc2: Linear::zeros(cfg.hidden(), d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputParams<T> {
    /// `(vocab_size + 1) × width` lookup table; the last row is the mask.
    Tokens {
        embed: Vec<T>,
    },
    Patches {
        proj: Linear<T>,
        cls: Vec<T>,
    },
}

/// Every trainable or frozen tensor of a model, in compute-friendly form.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub input: InputParams<T>,
    /// `tokens(stage) × width`.
    pub pos: Vec<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm: Norm<T>,
    /// Symbol head (warm-up) or class head (vision).
    pub head: Linear<T>,
}

/// Which family a tensor belongs to; drives surgery scopes and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    TokenEmbed,
    PatchEmbed,
    ClassToken,
    Position,
    Norm,
    AttentionWeight,
    AttentionBias,
    MlpWeight,
    MlpBias,
    Head,
}

/// Name, shape and kind for each tensor of `cfg` at `stage`, in manifest order.
pub fn layout(cfg: &ModelConfig, stage: Stage) -> Vec<(String, Vec<usize>, TensorKind)> {
    use TensorKind::*;
    let d = cfg.width;
    let mut v = Vec::new();
    match stage {
        Stage::Warmup => {
            v.push((
                "tok_embed".to_string(),
                vec![cfg.vocab_size + 1, d],
                TokenEmbed,
            ));
        }
        Stage::Vision => {
            v.push((
                "patch_embed.weight".into(),
                vec![cfg.patch_dim(), d],
                PatchEmbed,
            ));
            v.push(("patch_embed.bias".into(), vec![d], PatchEmbed));
            v.push(("cls_token".into(), vec![1, d], ClassToken));
        }
    }
    v.push(("pos_embed".into(), vec![cfg.tokens(stage), d], Position));
    let h = cfg.hidden();
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        v.push((format!("{p}.norm1.weight"), vec![d], Norm));
        v.push((format!("{p}.norm1.bias"), vec![d], Norm));
        for proj in ["q", "k", "v", "out"] {
            v.push((
                format!("{p}.attn.{proj}.weight"),
                vec![d, d],
                AttentionWeight,
            ));
            v.push((format!("{p}.attn.{proj}.bias"), vec![d], AttentionBias));
        }
        v.push((format!("{p}.norm2.weight"), vec![d], Norm));
        v.push((format!("{p}.norm2.bias"), vec![d], Norm));
        v.push((format!("{p}.mlp.fc1.weight"), vec![d, h], MlpWeight));
        v.push((format!("{p}.mlp.fc1.bias"), vec![h], MlpBias));
        v.push((format!("{p}.mlp.fc2.weight"), vec![h, d], MlpWeight));
        v.push((format!("{p}.mlp.fc2.bias"), vec![d], MlpBias));
    }
    v.push(("norm.weight".into(), vec![d], Norm));
    v.push(("norm.bias".into(), vec![d], Norm));
    let (head, out) = match stage {
        Stage::Warmup => ("mlm_head", cfg.vocab_size),
        Stage::Vision => ("cls_head", cfg.num_classes),
    };
    v.push((format!("{head}.weight"), vec![d, out], Head));
    v.push((format!("{head}.bias"), vec![out], Head));
    v
}

/// Block index of a `blocks.{i}.…` tensor name.
pub fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

impl<T: Real> ModelParams<T> {
    pub fn stage(&self) -> Stage {
        match self.input {
            InputParams::Tokens { .. } => Stage::Warmup,
            InputParams::Patches { .. } => Stage::Vision,
        }
    }

    /// All-zero parameters with the layout of `cfg` at `stage`.
    pub fn zeros(cfg: &ModelConfig, stage: Stage) -> Self {
        let d = cfg.width;
        let input = match stage {
            Stage::Warmup => InputParams::Tokens {
                embed: vec![T::zero(); (cfg.vocab_size + 1) * d],
            },
            Stage::Vision => InputParams::Patches {
                proj: Linear::zeros(cfg.patch_dim(), d),
                cls: vec![T::zero(); d],
            },
        };
        let head_out = match stage {
            Stage::Warmup => cfg.vocab_size,
            Stage::Vision => cfg.num_classes,
        };
        ModelParams {
            config: cfg.clone(),
            input,
            pos: vec![T::zero(); cfg.tokens(stage) * d],
            blocks: (0..cfg.depth).map(|_| BlockParams::zeros(cfg)).collect(),
            norm: Norm::zeros(d),
            head: Linear::zeros(d, head_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.stage())
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut v: Vec<&Vec<T>> = Vec::new();
        match &self.input {
            InputParams::Tokens { embed } => v.push(embed),
            InputParams::Patches { proj, cls } => {
                v.push(&proj.weight);
                v.push(&proj.bias);
                v.push(cls);
            }
        }
        v.push(&self.pos);
        for b in &self.blocks {
            v.extend([&b.norm1.weight, &b.norm1.bias]);
            for l in [&b.q, &b.k, &b.v, &b.out] {
                v.extend([&l.weight, &l.bias]);
            }
            v.extend([&b.norm2.weight, &b.norm2.bias]);
            v.extend([&b.fc1.weight, &b.fc1.bias, &b.fc2.weight, &b.fc2.bias]);
        }
        v.extend([
            &self.norm.weight,
            &self.norm.bias,
            &self.head.weight,
            &self.head.bias,
        ]);
        v
    }

    /// Mutable tensors in manifest order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v: Vec<&mut Vec<T>> = Vec::new();
        match &mut self.input {
            InputParams::Tokens { embed } => v.push(embed),
            InputParams::Patches { proj, cls } => {
                v.push(&mut proj.weight);
                v.push(&mut proj.bias);
                v.push(cls);
            }
        }
        v.push(&mut self.pos);
        for b in &mut self.blocks {
            v.push(&mut b.norm1.weight);
            v.push(&mut b.norm1.bias);
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.out] {
                v.push(&mut l.weight);
                v.push(&mut l.bias);
            }
            v.push(&mut b.norm2.weight);
            v.push(&mut b.norm2.bias);
            v.push(&mut b.fc1.weight);
            v.push(&mut b.fc1.bias);
            v.push(&mut b.fc2.weight);
            v.push(&mut b.fc2.bias);
        }
        v.push(&mut self.norm.weight);
        v.push(&mut self.norm.bias);
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>, TensorKind)> {
        layout(&self.config, self.stage())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other`, elementwise over every tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config, self.stage());
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan);
            }
        }
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.config.validate()?;
        let mut params = Self::zeros(&ckpt.config, ckpt.stage);
        let layout = params.layout();
        if layout.len() != ckpt.tensors.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors for a {} checkpoint, found {}",
                layout.len(),
                ckpt.stage,
                ckpt.tensors.len()
            )));
        }
        for ((name, shape, _), (dst, src)) in layout
            .iter()
            .zip(params.tensors_mut().into_iter().zip(&ckpt.tensors))
        {
            if &src.name != name || &src.shape != shape {
                return Err(ModelError::Layout(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    src.name, src.shape
                )));
            }
            for (d, &s) in dst.iter_mut().zip(&src.data) {
                *d = T::from_f32(s).expect("f32 fits");
            }
        }
        Ok(params)
    }

    /// Named `f32` tensors; `frozen(name)` sets each flag.
    pub fn to_named(&self, frozen: impl Fn(&str) -> bool) -> Vec<NamedTensor> {
        self.layout()
            .into_iter()
            .zip(self.tensors())
            .map(|((name, shape, _), data)| NamedTensor {
                frozen: frozen(&name),
                name,
                shape,
                data: data
                    .iter()
                    .map(|x| x.to_f32().unwrap_or(f32::NAN))
                    .collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_tensors() {
        let cfg = ModelConfig::desk();
        for stage in [Stage::Warmup, Stage::Vision] {
            let p = ModelParams::<f32>::zeros(&cfg, stage);
            let l = p.layout();
            let t = p.tensors();
            assert_eq!(l.len(), t.len());
            for ((name, shape, _), data) in l.iter().zip(t) {
                assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
            }
        }
    }

    #[test]
    fn block_index_parses() {
        assert_eq!(block_index("blocks.11.attn.q.weight"), Some(11));
        assert_eq!(block_index("pos_embed"), None);
    }
}
