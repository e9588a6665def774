//! Parametric class-conditional images renderable at any resolution.
//!
//! Class `k` of `K` fixes the hue (`360·k/K` degrees), the nominal gradient
//! orientation (`180·k/K` degrees) and the blob count (`1 + k mod 3`). The
//! seed jitters orientation, saturation, blob placement and contrast. Every
//! pixel of an image shares the class hue, so hue statistics are independent
//! of resolution and survive any linear low-pass codec.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Anchor hue of class `k`, in degrees.
pub fn class_hue(class_id: u32, class_count: usize) -> f64 {
    360.0 * class_id as f64 / class_count as f64
}

/// Smallest angular distance between two hues in degrees.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// `(r, g, b)` for hue in degrees and saturation/value in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees and chroma of one RGB pixel.
pub fn rgb_hue_chroma(rgb: [f64; 3]) -> (f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma <= 0.0 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    (60.0 * h, chroma)
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    amp: f64,
}

/// Seed-dependent parameters of one render, all in relative coordinates.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub hue: f64,
    pub saturation: f64,
    pub orientation: f64,
    pub contrast: f64,
    blobs: Vec<Blob>,
}

impl SynthParams {
    pub fn new(class_id: u32, class_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class_id as u64) << 40));
        let k = class_id as usize;
        let hue = class_hue(class_id, class_count);
        let saturation = rng.random_range(0.7..0.9);
        let orientation = 180.0 * k as f64 / class_count as f64 + rng.random_range(-10.0..10.0);
        let contrast = rng.random_range(0.3..0.45);
        let blobs = (0..1 + k % 3)
            .map(|_| Blob {
                cy: rng.random_range(0.2..0.8),
                cx: rng.random_range(0.2..0.8),
                radius: rng.random_range(0.12..0.25),
                amp: rng.random_range(0.15..0.3),
            })
            .collect();
        Self {
            hue,
            saturation,
            orientation,
            contrast,
            blobs,
        }
    }

    /// Brightness at relative position `(u, v)` in `[0, 1]²`.
    fn value(&self, u: f64, v: f64) -> f64 {
        let (s, c) = self.orientation.to_radians().sin_cos();
        // projection onto the gradient direction, centered and in [-0.71, 0.71]
        let along = (u - 0.5) * s + (v - 0.5) * c;
        let mut val = 0.55 + self.contrast * along;
        for b in &self.blobs {
            let d2 = (u - b.cy).powi(2) + (v - b.cx).powi(2);
            val += b.amp * (-d2 / (2.0 * b.radius * b.radius)).exp();
        }
        val.clamp(0.05, 1.0)
    }
}

/// Renders a `3 × h × w` RGB image in `[0, 1]`.
pub fn synth_image(class_id: u32, class_count: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
    let p = SynthParams::new(class_id, class_count, seed);
    let mut img = Array3::zeros((3, h, w));
    for y in 0..h {
        let u = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let v = (x as f64 + 0.5) / w as f64;
            let rgb = hsv_to_rgb(p.hue, p.saturation, p.value(u, v));
            for (c, val) in rgb.iter().enumerate() {
                img[[c, y, x]] = *val as f32;
            }
        }
    }
    img
}

/// Chroma-weighted circular mean hue of an RGB image, in degrees.
///
/// Returns `None` for an achromatic image.
pub fn dominant_hue(img: &Array3<f32>) -> Option<f64> {
    let (_, h, w) = img.dim();
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let rgb = [0, 1, 2].map(|c| (img[[c, y, x]] as f64).clamp(0.0, 1.0));
            let (hue, chroma) = rgb_hue_chroma(rgb);
            let (s, c) = hue.to_radians().sin_cos();
            sx += chroma * c;
            sy += chroma * s;
        }
    }
    if sx.hypot(sy) < 1e-9 {
        return None;
    }
    Some(sy.atan2(sx).to_degrees().rem_euclid(360.0))
}

/// Class whose anchor hue is closest, if within half the class spacing.
pub fn classify_hue(hue: f64, class_count: usize) -> Option<u32> {
    let half = 180.0 / class_count as f64;
    (0..class_count as u32)
        .map(|k| (k, hue_distance(hue, class_hue(k, class_count))))
        .filter(|&(_, d)| d < half)
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(k, _)| k)
}
