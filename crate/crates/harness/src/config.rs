//! Flat `key=value` run configuration.
//!
//! Keys are grouped by prefix: `train.*`, `data.*`, `codec.*` and `model.*`.
//! Model keys default to the tiny preset sized for the codec and class count.

use std::collections::BTreeMap;
use std::str::FromStr;

use nit_core::blocks::NitConfig;
use nit_core::{NitError, Result};

use crate::data::{CodecConfig, DatasetSpec, Mixture};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub mixture: Mixture,
    pub classes: usize,
    pub instances: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mixture: Mixture::NativePlusFixed,
            classes: 4,
            instances: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub model: NitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_kv(&BTreeMap::new()).expect("defaults are valid")
    }
}

fn take<V: FromStr>(kv: &mut BTreeMap<String, String>, key: &str, default: V) -> Result<V> {
    match kv.remove(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| NitError::Config(format!("cannot parse {key}={raw}"))),
    }
}

impl RunConfig {
    /// Builds a config from explicit keys; anything absent takes its default.
    /// Unknown keys are rejected.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut kv = kv.clone();
        let d = TrainConfig::default();
        let grad_clip: f64 = take(&mut kv, "train.max_grad_norm", d.max_grad_norm.unwrap_or(0.0))?;
        let train = TrainConfig {
            steps: take(&mut kv, "train.steps", d.steps)?,
            tokens_per_step: take(&mut kv, "train.tokens_per_step", d.tokens_per_step)?,
            lr: take(&mut kv, "train.lr", d.lr)?,
            warmup_steps: take(&mut kv, "train.warmup_steps", d.warmup_steps)?,
            seed: take(&mut kv, "train.seed", d.seed)?,
            p_mean: take(&mut kv, "train.p_mean", d.p_mean)?,
            p_std: take(&mut kv, "train.p_std", d.p_std)?,
            max_grad_norm: (grad_clip > 0.0).then_some(grad_clip),
            checkpoint_every: take(&mut kv, "train.checkpoint_every", d.checkpoint_every)?,
            log_every: take(&mut kv, "train.log_every", d.log_every)?,
        };
        train.validate()?;

        let dd = DataConfig::default();
        let mixture = match kv.remove("data.mixture") {
            Some(m) => Mixture::parse(&m)?,
            None => dd.mixture,
        };
        let data = DataConfig {
            mixture,
            classes: take(&mut kv, "data.classes", dd.classes)?,
            instances: take(&mut kv, "data.instances", dd.instances)?,
            seed: take(&mut kv, "data.seed", dd.seed)?,
        };

        let dc = CodecConfig::default();
        let codec = CodecConfig {
            downsample: take(&mut kv, "codec.downsample", dc.downsample)?,
            keep: take(&mut kv, "codec.keep", dc.keep)?,
            seed: take(&mut kv, "codec.seed", dc.seed)?,
        };

        let mut model_kv = NitConfig::tiny(codec.latent_channels(), 1, data.classes).to_kv();
        let user_model: Vec<String> = kv.keys().filter(|k| k.starts_with("model.")).cloned().collect();
        for k in user_model {
            if !model_kv.contains_key(&k) {
                return Err(NitError::Config(format!("unknown key {k}")));
            }
            let v = kv.remove(&k).expect("listed");
            model_kv.insert(k, v);
        }
        let model = NitConfig::from_kv(&model_kv)?;
        if let Some(k) = kv.keys().next() {
            return Err(NitError::Config(format!("unknown key {k}")));
        }
        let cfg = Self { train, data, codec, model };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.latent_channels != self.codec.latent_channels() {
            return Err(NitError::Config(format!(
                "model.latent_channels={} but the codec produces {}",
                self.model.latent_channels,
                self.codec.latent_channels()
            )));
        }
        if self.model.num_classes < self.data.classes {
            return Err(NitError::Config(format!(
                "model.num_classes={} is below data.classes={}",
                self.model.num_classes, self.data.classes
            )));
        }
        self.dataset_spec().validate()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            codec: self.codec,
            patch_size: self.model.patch_size,
            ..DatasetSpec::mixture(self.data.mixture, self.data.classes, self.data.instances, self.data.seed)
        }
    }

    /// Every effective setting, suitable for [`RunConfig::from_kv`].
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("train.steps", t.steps.to_string());
        put("train.tokens_per_step", t.tokens_per_step.to_string());
        put("train.lr", t.lr.to_string());
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.seed", t.seed.to_string());
        put("train.p_mean", t.p_mean.to_string());
        put("train.p_std", t.p_std.to_string());
        put("train.max_grad_norm", t.max_grad_norm.unwrap_or(0.0).to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("train.log_every", t.log_every.to_string());
        put("data.mixture", self.data.mixture.tag().to_string());
        put("data.classes", self.data.classes.to_string());
        put("data.instances", self.data.instances.to_string());
        put("data.seed", self.data.seed.to_string());
        kv.extend(self.codec.to_kv());
        kv.extend(self.model.to_kv());
        kv
    }
}

/// Renders a map as sorted `key=value` lines.
pub fn render_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.model.latent_channels, 12);
        assert_eq!(c.model.num_classes, 4);
        assert_eq!(RunConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn overrides_and_rejections() {
        let kv = BTreeMap::from([
            ("train.steps".to_string(), "7".to_string()),
            ("data.mixture".to_string(), "c".to_string()),
            ("model.depth".to_string(), "2".to_string()),
            ("train.max_grad_norm".to_string(), "0".to_string()),
        ]);
        let c = RunConfig::from_kv(&kv).unwrap();
        assert_eq!((c.train.steps, c.data.mixture, c.model.depth), (7, Mixture::FixedOnly, 2));
        assert_eq!(c.train.max_grad_norm, None);
        for (k, v) in [("train.stepz", "1"), ("model.width", "3"), ("train.steps", "x"), ("model.latent_channels", "5"), ("codec.downsample", "24")] {
            let bad = BTreeMap::from([(k.to_string(), v.to_string())]);
            assert!(RunConfig::from_kv(&bad).is_err(), "{k}={v}");
        }
    }
}
