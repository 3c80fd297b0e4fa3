use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::kv::{short_hash, KvDoc, KvError};

/// Which input adapter and head a checkpoint carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Frozen token table, frozen positions, per-position symbol head.
    Warmup,
    /// Patch projection, class token, classification head.
    Vision,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Vision => "vision",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warmup" => Ok(Stage::Warmup),
            "vision" => Ok(Stage::Vision),
            _ => Err(format!("unknown stage `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Token count of a warm-up sequence.
    pub seq_len: usize,
    /// Symbol count, excluding the mask symbol.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl ModelConfig {
    /// ViT-T/16 shape.
    pub fn vit_t() -> Self {
        ModelConfig {
            preset: "vit-t".into(),
            depth: 12,
            width: 192,
            heads: 3,
            mlp_ratio: 4,
            seq_len: 196,
            vocab_size: 128,
            num_classes: 1000,
            image_size: 224,
            patch_size: 16,
            channels: 3,
        }
    }

    /// Laptop-scale shape for 32×32 images.
    pub fn desk() -> Self {
        ModelConfig {
            preset: "desk".into(),
            depth: 6,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            seq_len: 64,
            vocab_size: 128,
            num_classes: 10,
            image_size: 32,
            patch_size: 4,
            channels: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "vit-t" => Ok(Self::vit_t()),
            "desk" => Ok(Self::desk()),
            other => Err(ModelError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length seen by the blocks at `stage`.
    pub fn tokens(&self, stage: Stage) -> usize {
        match stage {
            Stage::Warmup => self.seq_len,
            Stage::Vision => self.num_patches() + 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("width, heads and mlp_ratio must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.seq_len == 0 || self.vocab_size == 0 || self.num_classes == 0 {
            return bad("seq_len, vocab_size and num_classes must be positive".into());
        }
        if self.patch_size == 0 || self.channels == 0 || self.image_size == 0 {
            return bad("image geometry must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self, d: &mut KvDoc) {
        d.push("model.preset", &self.preset)
            .push("model.depth", self.depth)
            .push("model.width", self.width)
            .push("model.heads", self.heads)
            .push("model.mlp_ratio", self.mlp_ratio)
            .push("model.seq_len", self.seq_len)
            .push("model.vocab_size", self.vocab_size)
            .push("model.num_classes", self.num_classes)
            .push("model.image_size", self.image_size)
            .push("model.patch_size", self.patch_size)
            .push("model.channels", self.channels);
    }

    pub fn from_kv(d: &KvDoc) -> Result<Self, KvError> {
        Ok(ModelConfig {
            preset: d.require("model.preset")?.to_string(),
            depth: d.parse_key("model.depth")?,
            width: d.parse_key("model.width")?,
            heads: d.parse_key("model.heads")?,
            mlp_ratio: d.parse_key("model.mlp_ratio")?,
            seq_len: d.parse_key("model.seq_len")?,
            vocab_size: d.parse_key("model.vocab_size")?,
            num_classes: d.parse_key("model.num_classes")?,
            image_size: d.parse_key("model.image_size")?,
            patch_size: d.parse_key("model.patch_size")?,
            channels: d.parse_key("model.channels")?,
        })
    }

    pub fn hash(&self) -> String {
        let mut d = KvDoc::new();
        self.to_kv(&mut d);
        short_hash(d.render().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let t = ModelConfig::vit_t();
        assert_eq!((t.depth, t.width, t.heads, t.mlp_ratio), (12, 192, 3, 4));
        let d = ModelConfig::desk();
        assert_eq!((d.depth, d.width, d.heads, d.mlp_ratio), (6, 64, 4, 4));
        assert_eq!(d.num_patches(), 64);
        assert_eq!(d.tokens(Stage::Vision), 65);
        t.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn width_must_divide() {
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn kv_round_trip() {
        let mut d = KvDoc::new();
        ModelConfig::desk().to_kv(&mut d);
        assert_eq!(ModelConfig::from_kv(&d).unwrap(), ModelConfig::desk());
    }
}
