use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub input_size: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            input_size: 128,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn upsample_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!(
                "input_size {} is not divisible by patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        // the decoder climbs back to full resolution in steps of 2
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return bad(format!(
                "patch_size must be a power of two ≥ 2, got {}",
                self.patch_size
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
    /// Empty means the last half of the encoder blocks.
    pub inject_blocks: Vec<usize>,
    pub texture_sigma: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck_dim: 16,
            inject_blocks: Vec::new(),
            texture_sigma: mocl_core::texture::DEFAULT_TEXTURE_SIGMA,
        }
    }
}

impl AdapterConfig {
    pub fn resolved_blocks(&self, depth: usize) -> Vec<usize> {
        if self.inject_blocks.is_empty() {
            (depth / 2..depth).collect()
        } else {
            let mut b = self.inject_blocks.clone();
            b.sort_unstable();
            b.dedup();
            b
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.bottleneck_dim == 0 || self.bottleneck_dim >= enc.embed_dim {
            return Err(ModelError::Config(format!(
                "bottleneck_dim {} must be in [1, {})",
                self.bottleneck_dim, enc.embed_dim
            )));
        }
        if let Some(b) = self.inject_blocks.iter().find(|&&b| b >= enc.depth) {
            return Err(ModelError::Config(format!(
                "inject block {b} outside [0, {})",
                enc.depth
            )));
        }
        if !(self.texture_sigma > 0.0) {
            return Err(ModelError::Config(format!(
                "texture_sigma must be positive, got {}",
                self.texture_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Channels M of the embedding head.
    pub embed_channels: usize,
    /// Channels of the full-resolution decoder layers.
    pub width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_channels: 32,
            width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    pub classes: Vec<String>,
    /// Seed of the random stand-in backbone; a pretrained checkpoint
    /// replaces those weights.
    #[serde(default = "default_seed")]
    pub backbone_seed: u64,
    /// Seed for the trainable adapter and decoder weights.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

impl ModelConfig {
    pub fn new(classes: Vec<String>) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            decoder: DecoderConfig::default(),
            classes,
            backbone_seed: default_seed(),
            seed: default_seed(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate(&self.encoder)?;
        if self.classes.is_empty() {
            return Err(ModelError::Config("at least one class is required".into()));
        }
        if self.decoder.embed_channels == 0 || self.decoder.width == 0 {
            return Err(ModelError::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_blocks_are_last_half() {
        assert_eq!(AdapterConfig::default().resolved_blocks(4), vec![2, 3]);
        assert_eq!(AdapterConfig::default().resolved_blocks(5), vec![2, 3, 4]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::new(vec!["a".into()]);
        c.validate().unwrap();
        c.encoder.input_size = 100;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(vec!["a".into()]);
        c.encoder.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(vec!["a".into()]);
        c.adapter.bottleneck_dim = 64;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(vec!["a".into()]);
        c.adapter.inject_blocks = vec![4];
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(vec![]).validate().is_err());
    }
}
