use std::collections::BTreeMap;

use crate::attention::{AttentionConfig, DEFAULT_TILE};
use crate::error::{NitError, Result};
use crate::rope::{RopeConfig, DEFAULT_THETA};

/// Architecture of a class-conditional model.
#[derive(Debug, Clone, PartialEq)]
pub struct NitConfig {
    pub latent_channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub qk_norm: bool,
    pub rope_theta: f64,
    pub class_drop_prob: f64,
    pub attn_tile: usize,
}

impl NitConfig {
    fn base(latent_channels: usize, patch_size: usize, num_classes: usize) -> Self {
        Self {
            latent_channels,
            patch_size,
            hidden_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes,
            freq_dim: 64,
            qk_norm: false,
            rope_theta: DEFAULT_THETA,
            class_drop_prob: 0.1,
            attn_tile: DEFAULT_TILE,
        }
    }

    /// d=64, depth 4, 4 heads.
    pub fn tiny(latent_channels: usize, patch_size: usize, num_classes: usize) -> Self {
        Self::base(latent_channels, patch_size, num_classes)
    }

    /// d=16, depth 2, 2 heads; small enough for finite differences.
    pub fn gradcheck(latent_channels: usize, patch_size: usize, num_classes: usize) -> Self {
        Self {
            hidden_dim: 16,
            depth: 2,
            num_heads: 2,
            freq_dim: 16,
            ..Self::base(latent_channels, patch_size, num_classes)
        }
    }

    /// DiT-B sized (d=768, depth 12, 12 heads).
    pub fn base_size(latent_channels: usize, patch_size: usize, num_classes: usize) -> Self {
        Self {
            hidden_dim: 768,
            depth: 12,
            num_heads: 12,
            freq_dim: 256,
            ..Self::base(latent_channels, patch_size, num_classes)
        }
    }

    /// DiT-XL sized (d=1152, depth 28, 16 heads).
    pub fn xl(latent_channels: usize, patch_size: usize, num_classes: usize) -> Self {
        Self {
            hidden_dim: 1152,
            depth: 28,
            num_heads: 16,
            freq_dim: 256,
            ..Self::base(latent_channels, patch_size, num_classes)
        }
    }

    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        Ok(AttentionConfig::new(self.hidden_dim, self.num_heads)?
            .with_qk_norm(self.qk_norm)
            .with_tile(self.attn_tile))
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.head_dim(), self.rope_theta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.patch_size == 0 || self.depth == 0 || self.num_classes == 0 {
            return Err(NitError::Config(
                "latent channels, patch size, depth and class count must be positive".into(),
            ));
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return Err(NitError::Config(format!("freq dim must be even, got {}", self.freq_dim)));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(NitError::Config(format!("bad mlp ratio {}", self.mlp_ratio)));
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            return Err(NitError::Config(format!("class drop prob {} outside [0,1]", self.class_drop_prob)));
        }
        self.attention()?;
        self.rope()?;
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("model.latent_channels", self.latent_channels.to_string());
        put("model.patch_size", self.patch_size.to_string());
        put("model.hidden_dim", self.hidden_dim.to_string());
        put("model.depth", self.depth.to_string());
        put("model.num_heads", self.num_heads.to_string());
        put("model.mlp_ratio", self.mlp_ratio.to_string());
        put("model.num_classes", self.num_classes.to_string());
        put("model.freq_dim", self.freq_dim.to_string());
        put("model.qk_norm", self.qk_norm.to_string());
        put("model.rope_theta", self.rope_theta.to_string());
        put("model.class_drop_prob", self.class_drop_prob.to_string());
        put("model.attn_tile", self.attn_tile.to_string());
        m
    }

    pub fn from_kv(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<V> {
            let raw = m
                .get(k)
                .ok_or_else(|| NitError::Config(format!("missing key {k}")))?;
            raw.parse()
                .map_err(|_| NitError::Config(format!("cannot parse {k}={raw}")))
        }
        let cfg = Self {
            latent_channels: get(m, "model.latent_channels")?,
            patch_size: get(m, "model.patch_size")?,
            hidden_dim: get(m, "model.hidden_dim")?,
            depth: get(m, "model.depth")?,
            num_heads: get(m, "model.num_heads")?,
            mlp_ratio: get(m, "model.mlp_ratio")?,
            num_classes: get(m, "model.num_classes")?,
            freq_dim: get(m, "model.freq_dim")?,
            qk_norm: get(m, "model.qk_norm")?,
            rope_theta: get(m, "model.rope_theta")?,
            class_drop_prob: get(m, "model.class_drop_prob")?,
            attn_tile: get(m, "model.attn_tile")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [
            NitConfig::tiny(12, 1, 4),
            NitConfig::gradcheck(4, 2, 3),
            NitConfig::base_size(4, 2, 1000),
            NitConfig::xl(32, 1, 1000),
        ] {
            cfg.validate().unwrap();
            assert_eq!(NitConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        }
        assert_eq!(NitConfig::tiny(12, 1, 4).mlp_hidden(), 256);
        assert_eq!(NitConfig::xl(4, 2, 1000).head_dim(), 72);
    }

    #[test]
    fn rejects_bad_heads() {
        let mut cfg = NitConfig::tiny(12, 1, 4);
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }
}
