use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Geometry of the student transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { image_size: 32, patch_size: 8, channels: 1, dim: 64, depth: 4, heads: 4, mlp_ratio: 2.0, num_classes: 2 }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("vit.{name} must be at least 1")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "vit.image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("vit.dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("vit.num_classes must be at least 2".into()));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("vit.mlp_ratio {} gives an empty MLP", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Layer families that receive low-rank factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTarget {
    /// The fused query/key/value projection.
    AttentionQkv,
    /// Attention output projection and both MLP layers.
    FullyConnected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, dropout: 0.1, targets: vec![LoraTarget::AttentionQkv, LoraTarget::FullyConnected] }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets(&self, target: LoraTarget) -> bool {
        self.targets.contains(&target)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        let s = self.scale();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Config(format!("lora.alpha / rank = {s} must be finite and positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Rank must fit every targeted layer.
    pub(crate) fn check_layer(&self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        if self.rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "lora.rank {} exceeds min(fan_in, fan_out) = {} of {name}",
                self.rank,
                d_in.min(d_out)
            )));
        }
        Ok(())
    }
}
