//! Native-resolution tokenization: image geometry checks, the patchify /
//! unpatchify reshape, the seeded toy codec and the on-disk latent format.

use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NitError, Result};
use crate::scalar::Scalar;

/// Geometry of a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_label: Option<u32>,
}

impl ImageSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            class_label: None,
        }
    }

    /// Checks that both sides are multiples of `downsample * patch`.
    pub fn validate(&self, downsample: usize, patch: usize) -> Result<()> {
        let unit = downsample * patch;
        check_axis("height", self.height, unit)?;
        check_axis("width", self.width, unit)
    }
}

fn check_axis(axis: &'static str, size: usize, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(NitError::Config(format!("{axis} factor must be positive")));
    }
    if size < factor || size % factor != 0 {
        return Err(NitError::NotDivisible { axis, size, factor });
    }
    Ok(())
}

/// Latent grid `(h, w, c)` produced from an image by a codec with the given
/// downsampling factor.
pub fn latent_shape(spec: &ImageSpec, downsample: usize, latent_channels: usize) -> Result<(usize, usize, usize)> {
    check_axis("height", spec.height, downsample)?;
    check_axis("width", spec.width, downsample)?;
    Ok((spec.height / downsample, spec.width / downsample, latent_channels))
}

/// One instance's latent, `channels × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage<T> {
    pub data: Array3<T>,
    pub label: Option<u32>,
    pub patch_size: usize,
}

impl<T: Scalar> LatentImage<T> {
    pub fn new(data: Array3<T>, label: Option<u32>, patch_size: usize) -> Self {
        Self { data, label, patch_size }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// `h·w / p²`
    pub fn token_count(&self) -> Result<usize> {
        let p = self.patch_size;
        check_axis("latent height", self.height(), p)?;
        check_axis("latent width", self.width(), p)?;
        Ok(self.height() * self.width() / (p * p))
    }
}

/// Patch tokens of one instance in raster order over the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T> {
    pub tokens: Array2<T>,
    /// `(h / p, w / p)`
    pub grid: (usize, usize),
    pub label: Option<u32>,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn new(tokens: Array2<T>, grid: (usize, usize), label: Option<u32>) -> Result<Self> {
        if tokens.nrows() != grid.0 * grid.1 || tokens.nrows() == 0 {
            return Err(NitError::Shape(format!(
                "{} token rows for a {}x{} grid",
                tokens.nrows(),
                grid.0,
                grid.1
            )));
        }
        Ok(Self { tokens, grid, label })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Reshapes `c × h × w` into `(h·w/p²) × (c·p·p)`.
///
/// Row `j` is the patch at raster position `j`; inside a row the layout is
/// `(py, px, channel)`.
pub fn patchify<T: Scalar>(latent: &LatentImage<T>) -> Result<TokenMatrix<T>> {
    let p = latent.patch_size;
    let (c, h, w) = (latent.channels(), latent.height(), latent.width());
    check_axis("latent height", h, p)?;
    check_axis("latent width", w, p)?;
    let (gh, gw) = (h / p, w / p);
    let dim = c * p * p;
    let mut tokens = Array2::zeros((gh * gw, dim));
    for gi in 0..gh {
        for gj in 0..gw {
            let mut row = tokens.row_mut(gi * gw + gj);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        row[(py * p + px) * c + ch] = latent.data[[ch, gi * p + py, gj * p + px]];
                    }
                }
            }
        }
    }
    TokenMatrix::new(tokens, (gh, gw), latent.label)
}

/// Exact inverse of [`patchify`] for an `h × w` latent with patch size `p`.
pub fn unpatchify<T: Scalar>(tokens: &TokenMatrix<T>, h: usize, w: usize, p: usize) -> Result<LatentImage<T>> {
    check_axis("latent height", h, p)?;
    check_axis("latent width", w, p)?;
    let (gh, gw) = (h / p, w / p);
    if tokens.len() != gh * gw {
        return Err(NitError::Shape(format!(
            "{} token rows cannot fill a {h}x{w} latent at patch size {p}",
            tokens.len()
        )));
    }
    let dim = tokens.token_dim();
    if dim % (p * p) != 0 {
        return Err(NitError::Shape(format!("token dim {dim} is not a multiple of p² = {}", p * p)));
    }
    let c = dim / (p * p);
    let mut data = Array3::zeros((c, h, w));
    for gi in 0..gh {
        for gj in 0..gw {
            let row = tokens.tokens.row(gi * gw + gj);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        data[[ch, gi * p + py, gj * p + px]] = row[(py * p + px) * c + ch];
                    }
                }
            }
        }
    }
    Ok(LatentImage::new(data, tokens.label, p))
}

/// Seed used when a codec config does not name one ("nit" in ASCII).
pub const DEFAULT_CODEC_SEED: u64 = 0x6e_69_74;

/// Linear stand-in for an image autoencoder.
///
/// Each `f × f` pixel block (`channels·f²` values, laid out `(channel, y, x)`)
/// is projected onto `latent_channels` orthonormal directions. The directions
/// are the `keep × keep` lowest-frequency 2D DCT-II patterns of every channel,
/// mixed by a seeded random rotation. With `keep == f` the projection is a
/// full orthogonal change of basis and the codec is lossless; decoding always
/// applies the transpose, which is the pseudo-inverse of an orthonormal-row
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodec {
    downsample: usize,
    image_channels: usize,
    kind: CodecKind,
    /// `latent_channels × (image_channels·f²)`, orthonormal rows.
    projection: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    /// Plain space-to-depth.
    Identity,
    /// Low-frequency DCT subspace mixed by a seeded rotation.
    Mixed { keep: usize, seed: u64 },
}

impl ToyCodec {
    pub fn identity(downsample: usize, image_channels: usize) -> Self {
        let n = image_channels * downsample * downsample;
        Self {
            downsample,
            image_channels,
            kind: CodecKind::Identity,
            projection: Array2::eye(n),
        }
    }

    pub fn mixed(downsample: usize, image_channels: usize, keep: usize, seed: u64) -> Result<Self> {
        if downsample == 0 || image_channels == 0 || keep == 0 || keep > downsample {
            return Err(NitError::Config(format!(
                "codec needs 0 < keep <= downsample, got keep={keep}, downsample={downsample}"
            )));
        }
        let f = downsample;
        let in_dim = image_channels * f * f;
        let m = image_channels * keep * keep;
        let dct = |u: usize, x: usize| -> f64 {
            let a = if u == 0 { (1.0 / f as f64).sqrt() } else { (2.0 / f as f64).sqrt() };
            a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * f) as f64).cos()
        };
        let mut basis = Array2::<f64>::zeros((m, in_dim));
        let mut r = 0;
        for ch in 0..image_channels {
            for u in 0..keep {
                for v in 0..keep {
                    for y in 0..f {
                        for x in 0..f {
                            basis[[r, (ch * f + y) * f + x]] = dct(u, y) * dct(v, x);
                        }
                    }
                    r += 1;
                }
            }
        }
        let rotation = random_orthogonal(m, seed);
        Ok(Self {
            downsample,
            image_channels,
            kind: CodecKind::Mixed { keep, seed },
            projection: rotation.dot(&basis),
        })
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn latent_channels(&self) -> usize {
        self.projection.nrows()
    }

    pub fn is_lossless(&self) -> bool {
        self.projection.nrows() == self.projection.ncols()
    }

    /// Encodes a `channels × H × W` pixel tensor.
    pub fn encode<T: Scalar>(&self, image: ArrayView3<T>, label: Option<u32>, patch_size: usize) -> Result<LatentImage<T>> {
        let (c, hh, ww) = image.dim();
        if c != self.image_channels {
            return Err(NitError::Shape(format!("expected {} channels, got {c}", self.image_channels)));
        }
        let spec = ImageSpec::new(hh, ww, c);
        let (h, w, lc) = latent_shape(&spec, self.downsample, self.latent_channels())?;
        let f = self.downsample;
        let mut block = vec![0.0f64; c * f * f];
        let mut data = Array3::zeros((lc, h, w));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    for y in 0..f {
                        for x in 0..f {
                            block[(ch * f + y) * f + x] = image[[ch, i * f + y, j * f + x]].as_f64();
                        }
                    }
                }
                for (o, row) in self.projection.outer_iter().enumerate() {
                    let s: f64 = row.iter().zip(&block).map(|(a, b)| a * b).sum();
                    data[[o, i, j]] = T::of(s);
                }
            }
        }
        Ok(LatentImage::new(data, label, patch_size))
    }

    /// Maps a latent back to pixels with the projection's pseudo-inverse.
    pub fn decode<T: Scalar>(&self, latent: &LatentImage<T>) -> Result<Array3<T>> {
        let (lc, h, w) = latent.data.dim();
        if lc != self.latent_channels() {
            return Err(NitError::Shape(format!(
                "expected {} latent channels, got {lc}",
                self.latent_channels()
            )));
        }
        let (f, c) = (self.downsample, self.image_channels);
        let mut out = Array3::zeros((c, h * f, w * f));
        let mut block = vec![0.0f64; c * f * f];
        for i in 0..h {
            for j in 0..w {
                block.iter_mut().for_each(|b| *b = 0.0);
                for (o, row) in self.projection.outer_iter().enumerate() {
                    let z = latent.data[[o, i, j]].as_f64();
                    for (b, &p) in block.iter_mut().zip(row.iter()) {
                        *b += p * z;
                    }
                }
                for ch in 0..c {
                    for y in 0..f {
                        for x in 0..f {
                            out[[ch, i * f + y, j * f + x]] = T::of(block[(ch * f + y) * f + x]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Seeded Haar-ish random orthogonal matrix via Gram-Schmidt on Gaussian rows.
fn random_orthogonal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::<f64>::zeros((n, n));
    let mut i = 0;
    while i < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for k in 0..i {
                let dot: f64 = q.row(k).iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vj, &qk) in v.iter_mut().zip(q.row(k).iter()) {
                    *vj -= dot * qk;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for (dst, x) in q.row_mut(i).iter_mut().zip(v) {
            *dst = x / norm;
        }
        i += 1;
    }
    q
}

pub const LATENT_MAGIC: &[u8; 4] = b"NITL";
pub const LATENT_VERSION: u16 = 1;
/// Magic, version, c/h/w/p, label.
pub const LATENT_HEADER_LEN: usize = 4 + 2 + 4 * 2 + 4;

/// Writes a latent as a fixed header followed by row-major little-endian
/// `f32` values. A missing label is stored as `-1`.
pub fn write_latent<W: Write, T: Scalar>(mut w: W, latent: &LatentImage<T>) -> Result<()> {
    let dims = [latent.channels(), latent.height(), latent.width(), latent.patch_size];
    let mut header = Vec::with_capacity(LATENT_HEADER_LEN);
    header.extend_from_slice(LATENT_MAGIC);
    header.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    for d in dims {
        let d = u16::try_from(d).map_err(|_| NitError::Format(format!("dimension {d} does not fit in u16")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    let label = match latent.label {
        Some(l) => i32::try_from(l).map_err(|_| NitError::Format(format!("label {l} does not fit in i32")))?,
        None => -1,
    };
    header.extend_from_slice(&label.to_le_bytes());
    w.write_all(&header)?;
    let mut body = Vec::with_capacity(latent.data.len() * 4);
    for v in latent.data.iter() {
        body.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn read_latent<R: Read, T: Scalar>(mut r: R) -> Result<LatentImage<T>> {
    let mut header = [0u8; LATENT_HEADER_LEN];
    r.read_exact(&mut header)?;
    if &header[..4] != LATENT_MAGIC {
        return Err(NitError::Format("bad latent magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([header[o], header[o + 1]]) as usize;
    let version = u16_at(4) as u16;
    if version != LATENT_VERSION {
        return Err(NitError::Format(format!("unsupported latent version {version}")));
    }
    let (c, h, w, p) = (u16_at(6), u16_at(8), u16_at(10), u16_at(12));
    let label = i32::from_le_bytes([header[14], header[15], header[16], header[17]]);
    let mut body = vec![0u8; c * h * w * 4];
    r.read_exact(&mut body)?;
    let values: Vec<T> = body
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let data = Array3::from_shape_vec((c, h, w), values).map_err(|e| NitError::Format(e.to_string()))?;
    let label = if label < 0 { None } else { Some(label as u32) };
    Ok(LatentImage::new(data, label, p))
}
