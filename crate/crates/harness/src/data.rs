//! Synthetic datasets, latent normalization and per-epoch packed batches.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use nit_core::diffusion::{add_noise, gaussian_noise, velocity_target, TimeSampler};
use nit_core::packing::{plan_packing, PackedBatch, PackedLayout};
use nit_core::tokenizer::{patchify, unpatchify, LatentImage, ToyCodec, TokenMatrix};
use nit_core::{NitError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::synth::synth_image;

/// Settings of the toy pixel codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecConfig {
    pub downsample: usize,
    pub keep: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            downsample: 16,
            keep: 2,
            seed: nit_core::tokenizer::DEFAULT_CODEC_SEED,
        }
    }
}

impl CodecConfig {
    pub fn build(&self) -> Result<ToyCodec> {
        ToyCodec::mixed(self.downsample, 3, self.keep, self.seed)
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.keep * self.keep
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("codec.downsample".to_string(), self.downsample.to_string()),
            ("codec.keep".to_string(), self.keep.to_string()),
            ("codec.seed".to_string(), self.seed.to_string()),
        ])
    }
}

/// Per-channel shift and a shared scale that bring latents to roughly unit
/// variance: `z = (x − mean_c) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl LatentNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            scale: 1.0,
        }
    }

    /// Fits the statistics over a set of raw latents.
    pub fn fit(latents: &[Array3<f32>]) -> Result<Self> {
        let c = latents
            .first()
            .ok_or_else(|| NitError::Config("cannot fit latent statistics on no data".into()))?
            .dim()
            .0;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for l in latents {
            for (ch, plane) in l.outer_iter().enumerate() {
                sum[ch] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
            count += l.dim().1 * l.dim().2;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = 0.0;
        for l in latents {
            for (ch, plane) in l.outer_iter().enumerate() {
                sq += plane.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let scale = (sq / (count * c) as f64).sqrt().max(1e-12);
        Ok(Self { mean, scale })
    }

    pub fn normalize(&self, raw: &mut Array3<f32>) {
        for (ch, mut plane) in raw.outer_iter_mut().enumerate() {
            let m = self.mean[ch];
            plane.mapv_inplace(|v| ((v as f64 - m) / self.scale) as f32);
        }
    }

    pub fn denormalize(&self, z: &mut Array3<f32>) {
        for (ch, mut plane) in z.outer_iter_mut().enumerate() {
            let m = self.mean[ch];
            plane.mapv_inplace(|v| (v as f64 * self.scale + m) as f32);
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mean: Vec<String> = self.mean.iter().map(|v| format!("{v:e}")).collect();
        BTreeMap::from([
            ("latent.mean".to_string(), mean.join(",")),
            ("latent.scale".to_string(), format!("{:e}", self.scale)),
        ])
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let bad = |k: &str| NitError::Config(format!("missing or malformed {k}"));
        let mean = kv
            .get("latent.mean")
            .ok_or_else(|| bad("latent.mean"))?
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("latent.mean")))
            .collect::<Result<Vec<_>>>()?;
        let scale = kv
            .get("latent.scale")
            .ok_or_else(|| bad("latent.scale"))?
            .parse()
            .map_err(|_| bad("latent.scale"))?;
        Ok(Self { mean, scale })
    }
}

/// Pixels to normalized latent.
pub fn encode_image(codec: &ToyCodec, norm: &LatentNorm, img: &Array3<f32>, label: Option<u32>, patch: usize) -> Result<LatentImage<f32>> {
    let mut latent = codec.encode(img.view(), label, patch)?;
    norm.normalize(&mut latent.data);
    Ok(latent)
}

/// Normalized latent to pixels.
pub fn decode_latent(codec: &ToyCodec, norm: &LatentNorm, latent: &LatentImage<f32>) -> Result<Array3<f32>> {
    let mut raw = latent.clone();
    norm.denormalize(&mut raw.data);
    codec.decode(&raw)
}

/// Where image sizes come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SizeSource {
    /// Both sides drawn from `min..=max` in steps of `step`, subject to
    /// `max(h, w) / min(h, w) ≤ max_aspect`.
    Native { min: usize, max: usize, step: usize, max_aspect: f64 },
    /// One of a fixed list of `(h, w)`, uniformly.
    Fixed(Vec<(usize, usize)>),
}

impl SizeSource {
    /// Every size the source can emit.
    pub fn support(&self) -> Vec<(usize, usize)> {
        match self {
            SizeSource::Fixed(list) => list.clone(),
            SizeSource::Native { min, max, step, max_aspect } => {
                let sides: Vec<usize> = (*min..=*max).step_by((*step).max(1)).collect();
                let mut out = Vec::new();
                for &h in &sides {
                    for &w in &sides {
                        if h.max(w) as f64 / h.min(w) as f64 <= *max_aspect {
                            out.push((h, w));
                        }
                    }
                }
                out
            }
        }
    }
}

/// Weighted mixture of size sources.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionSampler {
    pub sources: Vec<(SizeSource, f64)>,
}

impl ResolutionSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let total: f64 = self.sources.iter().map(|(_, w)| w).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = &self.sources[self.sources.len() - 1].0;
        for (src, w) in &self.sources {
            if pick < *w {
                chosen = src;
                break;
            }
            pick -= w;
        }
        let support = chosen.support();
        support[rng.random_range(0..support.len())]
    }

    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut all: Vec<_> = self.sources.iter().flat_map(|(s, _)| s.support()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// The three training mixtures compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixture {
    /// (a) native sizes only.
    Native,
    /// (b) native sizes plus the two fixed squares.
    NativePlusFixed,
    /// (c) the two fixed squares only.
    FixedOnly,
}

impl Mixture {
    pub const NATIVE_MIN: usize = 32;
    pub const NATIVE_MAX: usize = 128;
    pub const NATIVE_STEP: usize = 16;
    pub const MAX_ASPECT: f64 = 2.0;
    pub const FIXED: [(usize, usize); 2] = [(64, 64), (128, 128)];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "native" => Ok(Self::Native),
            "b" | "native+fixed" => Ok(Self::NativePlusFixed),
            "c" | "fixed" => Ok(Self::FixedOnly),
            other => Err(NitError::Config(format!("unknown mixture {other:?} (expected a, b or c)"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Native => "a",
            Self::NativePlusFixed => "b",
            Self::FixedOnly => "c",
        }
    }

    pub fn sampler(&self) -> ResolutionSampler {
        let native = SizeSource::Native {
            min: Self::NATIVE_MIN,
            max: Self::NATIVE_MAX,
            step: Self::NATIVE_STEP,
            max_aspect: Self::MAX_ASPECT,
        };
        let fixed = |s: (usize, usize)| SizeSource::Fixed(vec![s]);
        let sources = match self {
            Self::Native => vec![(native, 1.0)],
            Self::NativePlusFixed => vec![(native, 1.0), (fixed(Self::FIXED[0]), 1.0), (fixed(Self::FIXED[1]), 1.0)],
            Self::FixedOnly => vec![(fixed(Self::FIXED[0]), 1.0), (fixed(Self::FIXED[1]), 1.0)],
        };
        ResolutionSampler { sources }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub class_count: usize,
    pub sizes: ResolutionSampler,
    pub instances: usize,
    pub seed: u64,
    pub codec: CodecConfig,
    pub patch_size: usize,
}

impl DatasetSpec {
    pub fn mixture(m: Mixture, class_count: usize, instances: usize, seed: u64) -> Self {
        Self {
            class_count,
            sizes: m.sampler(),
            instances,
            seed,
            codec: CodecConfig::default(),
            patch_size: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.instances == 0 {
            return Err(NitError::Config("dataset needs at least one class and one instance".into()));
        }
        let unit = self.codec.downsample * self.patch_size;
        for (h, w) in self.sizes.support() {
            for (axis, size) in [("height", h), ("width", w)] {
                if size == 0 || size % unit != 0 {
                    return Err(NitError::NotDivisible { axis, size, factor: unit });
                }
            }
        }
        Ok(())
    }
}

/// One pre-encoded training example.
#[derive(Debug, Clone)]
pub struct Instance {
    pub class_id: u32,
    pub size: (usize, usize),
    pub seed: u64,
    pub tokens: TokenMatrix<f32>,
}

/// Encoded dataset plus the codec and normalization used to build it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub codec: ToyCodec,
    pub norm: LatentNorm,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn build(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let codec = spec.codec.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut raw = Vec::with_capacity(spec.instances);
        let mut meta = Vec::with_capacity(spec.instances);
        for i in 0..spec.instances {
            let class_id = (i % spec.class_count) as u32;
            let size = spec.sizes.sample(&mut rng);
            let seed: u64 = rng.random();
            let img = synth_image(class_id, spec.class_count, size.0, size.1, seed);
            raw.push(codec.encode(img.view(), Some(class_id), spec.patch_size)?.data);
            meta.push((class_id, size, seed));
        }
        let norm = LatentNorm::fit(&raw)?;
        let mut instances = Vec::with_capacity(spec.instances);
        for (mut data, (class_id, size, seed)) in raw.into_iter().zip(meta) {
            norm.normalize(&mut data);
            let tokens = patchify(&LatentImage::new(data, Some(class_id), spec.patch_size))?;
            instances.push(Instance { class_id, size, seed, tokens });
        }
        Ok(Self { spec, codec, norm, instances })
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.tokens.len()).collect()
    }

    pub fn max_tokens(&self) -> usize {
        self.token_counts().into_iter().max().unwrap_or(0)
    }

    /// Latent of instance `i` back in `c × h × w` form.
    pub fn latent(&self, i: usize) -> Result<LatentImage<f32>> {
        let inst = &self.instances[i];
        let p = self.spec.patch_size;
        let (gh, gw) = inst.tokens.grid;
        unpatchify(&inst.tokens, gh * p, gw * p, p)
    }
}

/// Noise, time and label-drop settings of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochConfig {
    pub tokens_per_step: usize,
    pub class_drop_prob: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub seed: u64,
}

/// A packed batch of noisy tokens with its regression target.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub batch: PackedBatch<f32>,
    pub target: Array2<f32>,
    /// Indices into the dataset, in pack order.
    pub members: Vec<usize>,
    pub waste: f64,
}

impl TrainBatch {
    pub fn tokens(&self) -> usize {
        self.batch.tokens.nrows()
    }
}

/// All packs of one epoch. Every instance appears in exactly one pack.
pub fn make_epoch(dataset: &Dataset, cfg: &EpochConfig, epoch: u64) -> Result<Vec<TrainBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..dataset.instances.len()).collect();
    order.shuffle(&mut rng);
    let counts: Vec<usize> = order.iter().map(|&i| dataset.instances[i].tokens.len()).collect();
    let plan = plan_packing(&counts, cfg.tokens_per_step)?;
    let mut packs = plan.packs;
    packs.shuffle(&mut rng);
    let mut times = TimeSampler::new(cfg.p_mean, cfg.p_std, rng.random())?;

    let mut out = Vec::with_capacity(packs.len());
    for pack in packs {
        let members: Vec<usize> = pack.iter().map(|&j| order[j]).collect();
        let grids: Vec<_> = members.iter().map(|&i| dataset.instances[i].tokens.grid).collect();
        let layout = PackedLayout::from_grids(grids)?;
        let dim = dataset.instances[members[0]].tokens.token_dim();
        let mut noisy = Array2::zeros((layout.total_tokens(), dim));
        let mut target = Array2::zeros((layout.total_tokens(), dim));
        let mut ts = Vec::with_capacity(members.len());
        let mut labels = Vec::with_capacity(members.len());
        for (r, &i) in layout.segments().zip(&members) {
            let x = &dataset.instances[i].tokens.tokens;
            let eps: Array2<f32> = gaussian_noise(x.nrows(), x.ncols(), &mut rng);
            let t = times.sample() as f32;
            noisy.slice_mut(ndarray::s![r.clone(), ..]).assign(&add_noise(x.view(), eps.view(), t)?);
            target.slice_mut(ndarray::s![r, ..]).assign(&velocity_target(x.view(), eps.view())?);
            ts.push(t);
            let drop = cfg.class_drop_prob > 0.0 && rng.random::<f64>() < cfg.class_drop_prob;
            labels.push(if drop { None } else { Some(dataset.instances[i].class_id) });
        }
        let waste = 1.0 - layout.total_tokens() as f64 / cfg.tokens_per_step as f64;
        out.push(TrainBatch {
            batch: PackedBatch::new(noisy, layout, labels, ts)?,
            target,
            members,
            waste,
        });
    }
    Ok(out)
}
