//! Sample quality at chosen resolutions: class hue accuracy and a diagonal
//! Fréchet distance between simple pixel statistics.

use ndarray::Array3;
use nit_core::diffusion::{euler_sample_batch, GuidanceConfig, SampleRequest, SamplerConfig, VelocityModel};
use nit_core::tokenizer::ToyCodec;
use nit_core::{NitError, Result};

use crate::data::{decode_latent, encode_image, LatentNorm};
use crate::synth::{classify_hue, dominant_hue, synth_image};

pub const PIXEL_FEATURES: usize = 8;

/// Mean RGB, std RGB, and mean absolute horizontal and vertical luminance
/// differences.
pub fn pixel_features(img: &Array3<f32>) -> [f64; PIXEL_FEATURES] {
    let (_, h, w) = img.dim();
    let n = (h * w) as f64;
    let mut f = [0.0; PIXEL_FEATURES];
    for c in 0..3 {
        let plane = img.index_axis(ndarray::Axis(0), c);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        f[c] = mean;
        f[3 + c] = var.sqrt();
    }
    let lum = |y: usize, x: usize| 0.299 * img[[0, y, x]] as f64 + 0.587 * img[[1, y, x]] as f64 + 0.114 * img[[2, y, x]] as f64;
    let (mut dx, mut dy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                dx += (lum(y, x + 1) - lum(y, x)).abs();
            }
            if y + 1 < h {
                dy += (lum(y + 1, x) - lum(y, x)).abs();
            }
        }
    }
    f[6] = if w > 1 { dx / (h * (w - 1)) as f64 } else { 0.0 };
    f[7] = if h > 1 { dy / ((h - 1) * w) as f64 } else { 0.0 };
    f
}

fn moments(feats: &[[f64; PIXEL_FEATURES]]) -> ([f64; PIXEL_FEATURES], [f64; PIXEL_FEATURES]) {
    let n = feats.len() as f64;
    let mut mean = [0.0; PIXEL_FEATURES];
    let mut std = [0.0; PIXEL_FEATURES];
    for i in 0..PIXEL_FEATURES {
        mean[i] = feats.iter().map(|f| f[i]).sum::<f64>() / n;
        std[i] = (feats.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

/// Fréchet distance between two feature sets under a diagonal Gaussian fit:
/// `Σ (μ_a − μ_b)² + (σ_a − σ_b)²`.
pub fn feature_distance(a: &[[f64; PIXEL_FEATURES]], b: &[[f64; PIXEL_FEATURES]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(NitError::Config("feature distance needs non-empty sets".into()));
    }
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    Ok((0..PIXEL_FEATURES).map(|i| (ma[i] - mb[i]).powi(2) + (sa[i] - sb[i]).powi(2)).sum())
}

/// Metrics of one image set at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub size: (usize, usize),
    pub samples: usize,
    pub hue_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub pixel_distance: f64,
}

/// Scores labelled images against a reference set of the same size.
pub fn score_images(images: &[(u32, Array3<f32>)], reference: &[(u32, Array3<f32>)], class_count: usize) -> Result<SizeReport> {
    let first = images.first().ok_or_else(|| NitError::Config("no images to score".into()))?;
    let size = (first.1.dim().1, first.1.dim().2);
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    for (class_id, img) in images {
        let k = *class_id as usize;
        if k >= class_count {
            return Err(NitError::LabelOutOfRange { label: *class_id, num_classes: class_count });
        }
        totals[k] += 1;
        if dominant_hue(img).and_then(|h| classify_hue(h, class_count)) == Some(*class_id) {
            hits[k] += 1;
        }
    }
    let feats = |set: &[(u32, Array3<f32>)]| set.iter().map(|(_, i)| pixel_features(i)).collect::<Vec<_>>();
    Ok(SizeReport {
        size,
        samples: images.len(),
        hue_accuracy: hits.iter().sum::<usize>() as f64 / images.len() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect(),
        pixel_distance: feature_distance(&feats(images), &feats(reference))?,
    })
}

/// Real images pushed through the codec, the best any generator of this
/// latent space can do.
pub fn reference_images(codec: &ToyCodec, norm: &LatentNorm, class_count: usize, size: (usize, usize), per_class: usize, seed: u64) -> Result<Vec<(u32, Array3<f32>)>> {
    let mut out = Vec::with_capacity(class_count * per_class);
    for k in 0..class_count as u32 {
        for j in 0..per_class as u64 {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(((k as u64) << 32) | j);
            let img = synth_image(k, class_count, size.0, size.1, s);
            let latent = encode_image(codec, norm, &img, Some(k), 1)?;
            out.push((k, decode_latent(codec, norm, &latent)?));
        }
    }
    Ok(out)
}

/// Generates `per_class` decoded images of every class at pixel size `size`.
#[allow(clippy::too_many_arguments)]
pub fn generate_images<M: VelocityModel<f32>>(
    model: &M,
    codec: &ToyCodec,
    norm: &LatentNorm,
    class_count: usize,
    size: (usize, usize),
    per_class: usize,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<Vec<(u32, Array3<f32>)>> {
    let f = codec.downsample();
    for (axis, s) in [("height", size.0), ("width", size.1)] {
        if s % (f * model.patch_size()) != 0 {
            return Err(NitError::NotDivisible { axis, size: s, factor: f * model.patch_size() });
        }
    }
    let requests: Vec<SampleRequest> = (0..class_count as u32)
        .flat_map(|k| std::iter::repeat_n(k, per_class))
        .map(|k| SampleRequest { height: size.0 / f, width: size.1 / f, label: Some(k) })
        .collect();
    let latents = euler_sample_batch(model, &requests, sampler, guidance)?;
    requests
        .iter()
        .zip(&latents)
        .map(|(r, l)| Ok((r.label.expect("conditional"), decode_latent(codec, norm, l)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub sizes: Vec<(usize, usize)>,
    pub per_class: usize,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub reference_seed: u64,
}

/// Hue accuracy and pixel-statistic distance at every requested size.
pub fn eval_generalization<M: VelocityModel<f32>>(
    model: &M,
    codec: &ToyCodec,
    norm: &LatentNorm,
    class_count: usize,
    cfg: &EvalConfig,
) -> Result<Vec<SizeReport>> {
    cfg.sizes
        .iter()
        .map(|&size| {
            let sampler = SamplerConfig {
                seed: cfg.sampler.seed ^ ((size.0 as u64) << 20 | size.1 as u64),
                ..cfg.sampler
            };
            let gen = generate_images(model, codec, norm, class_count, size, cfg.per_class, &sampler, &cfg.guidance)?;
            let reference = reference_images(codec, norm, class_count, size, cfg.per_class, cfg.reference_seed)?;
            score_images(&gen, &reference, class_count)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CodecConfig;
    use ndarray::{Array2, ArrayView2};
    use nit_core::packing::PackedLayout;

    /// Predicts zero velocity, so samples are pure decoded noise.
    struct Still;

    impl VelocityModel<f32> for Still {
        fn latent_channels(&self) -> usize {
            12
        }
        fn patch_size(&self) -> usize {
            1
        }
        fn velocity(&self, x: ArrayView2<f32>, _: &PackedLayout, _: &[f32], _: &[Option<u32>]) -> Result<Array2<f32>> {
            Ok(Array2::zeros(x.raw_dim()))
        }
    }

    #[test]
    fn real_images_score_perfectly() {
        let codec = CodecConfig::default().build().unwrap();
        let norm = LatentNorm::identity(12);
        let a = reference_images(&codec, &norm, 4, (160, 96), 6, 1).unwrap();
        let b = reference_images(&codec, &norm, 4, (160, 96), 6, 2).unwrap();
        let r = score_images(&a, &b, 4).unwrap();
        assert_eq!(r.hue_accuracy, 1.0);
        assert_eq!(r.size, (160, 96));
        assert!(r.pixel_distance < 0.01, "{}", r.pixel_distance);
        assert_eq!(score_images(&a, &a, 4).unwrap().pixel_distance, 0.0);
    }

    #[test]
    fn noise_scores_near_chance_and_far_in_pixel_stats() {
        let codec = CodecConfig::default().build().unwrap();
        let norm = LatentNorm { mean: vec![0.0; 12], scale: 0.5 };
        let cfg = EvalConfig {
            sizes: vec![(64, 64)],
            per_class: 50,
            sampler: SamplerConfig::new(2, 3).unwrap(),
            guidance: GuidanceConfig::none(),
            reference_seed: 0,
        };
        let r = &eval_generalization(&Still, &codec, &norm, 4, &cfg).unwrap()[0];
        assert!((r.hue_accuracy - 0.25).abs() < 0.1, "{}", r.hue_accuracy);
        assert!(r.pixel_distance > 0.05, "{}", r.pixel_distance);
    }

    #[test]
    fn features_of_a_flat_image() {
        let img = Array3::from_shape_fn((3, 4, 5), |(c, _, _)| [0.2, 0.4, 0.6][c]);
        let f = pixel_features(&img);
        for (got, want) in f.iter().zip([0.2, 0.4, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-6);
        }
        let a = [[1.0; 8], [3.0; 8]];
        let b = [[2.0; 8]];
        // means agree, stds differ by 1 in each of 8 features
        assert!((feature_distance(&a, &b).unwrap() - 8.0).abs() < 1e-12);
    }
}
