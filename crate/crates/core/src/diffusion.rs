//! Flow matching on the linear path `x_t = (1−t)·x + t·ε` with velocity
//! target `ε − x`, logit-normal time sampling, Euler sampling and
//! interval-gated classifier-free guidance.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::blocks::NitParams;
use crate::error::{NitError, Result};
use crate::packing::{segment_ranges, validate_cu_seqlens, PackedLayout};
use crate::scalar::Scalar;
use crate::tokenizer::{unpatchify, LatentImage, TokenMatrix};

/// Draws `t = σ/(1+σ)` with `ln σ ~ N(p_mean, p_std²)`.
#[derive(Debug, Clone)]
pub struct TimeSampler {
    pub p_mean: f64,
    pub p_std: f64,
    rng: ChaCha8Rng,
}

impl TimeSampler {
    pub fn new(p_mean: f64, p_std: f64, seed: u64) -> Result<Self> {
        if !p_mean.is_finite() || !(p_std.is_finite() && p_std >= 0.0) {
            return Err(NitError::Config(format!("bad logit-normal parameters ({p_mean}, {p_std})")));
        }
        Ok(Self {
            p_mean,
            p_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let sigma = (self.p_mean + self.p_std * z).exp();
        // keep strictly inside (0, 1) even for extreme draws
        (sigma / (1.0 + sigma)).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
    }

    pub fn sample_n(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample()).collect()
    }
}

pub fn sample_time(sampler: &mut TimeSampler) -> f64 {
    sampler.sample()
}

fn same_shape<T>(a: &ArrayView2<T>, b: &ArrayView2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(NitError::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `(1−t)·x + t·ε`.
pub fn add_noise<T: Scalar>(x: ArrayView2<T>, eps: ArrayView2<T>, t: T) -> Result<Array2<T>> {
    same_shape(&x, &eps, "add_noise")?;
    let mut out = x.to_owned();
    out.zip_mut_with(&eps, |a, &e| *a = (T::one() - t) * *a + t * e);
    Ok(out)
}

/// [`add_noise`] with each instance's own `t`.
pub fn add_noise_packed<T: Scalar>(x: ArrayView2<T>, eps: ArrayView2<T>, times: &[T], cu_seqlens: &[i32]) -> Result<Array2<T>> {
    same_shape(&x, &eps, "add_noise")?;
    validate_cu_seqlens(cu_seqlens)?;
    if times.len() + 1 != cu_seqlens.len() || x.nrows() != *cu_seqlens.last().unwrap() as usize {
        return Err(NitError::Layout("times or rows disagree with cu_seqlens".into()));
    }
    let mut out = Array2::zeros(x.raw_dim());
    for (r, &t) in segment_ranges(cu_seqlens).zip(times) {
        out.slice_mut(s![r.clone(), ..])
            .assign(&add_noise(x.slice(s![r.clone(), ..]), eps.slice(s![r, ..]), t)?);
    }
    Ok(out)
}

/// `ε − x`.
pub fn velocity_target<T: Scalar>(x: ArrayView2<T>, eps: ArrayView2<T>) -> Result<Array2<T>> {
    same_shape(&x, &eps, "velocity_target")?;
    Ok(&eps - &x)
}

/// Per-instance mean squared error, averaged over instances.
pub fn fm_loss<T: Scalar>(pred: ArrayView2<T>, target: ArrayView2<T>, cu_seqlens: &[i32]) -> Result<f64> {
    Ok(fm_loss_and_grad(pred, target, cu_seqlens)?.0)
}

/// [`fm_loss`] together with `dL/dpred`.
pub fn fm_loss_and_grad<T: Scalar>(
    pred: ArrayView2<T>,
    target: ArrayView2<T>,
    cu_seqlens: &[i32],
) -> Result<(f64, Array2<T>)> {
    same_shape(&pred, &target, "fm_loss")?;
    validate_cu_seqlens(cu_seqlens)?;
    if pred.nrows() != *cu_seqlens.last().unwrap() as usize {
        return Err(NitError::Layout(format!(
            "{} prediction rows but cu_seqlens ends at {}",
            pred.nrows(),
            cu_seqlens.last().unwrap()
        )));
    }
    let n = (cu_seqlens.len() - 1) as f64;
    let cols = pred.ncols() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    for r in segment_ranges(cu_seqlens) {
        let count = r.len() as f64 * cols;
        let p = pred.slice(s![r.clone(), ..]);
        let t = target.slice(s![r.clone(), ..]);
        let mut g = grad.slice_mut(s![r, ..]);
        let mut sq = 0.0;
        for ((gv, &pv), &tv) in g.iter_mut().zip(p.iter()).zip(t.iter()) {
            let diff = pv.as_f64() - tv.as_f64();
            sq += diff * diff;
            *gv = T::of(2.0 * diff / (count * n));
        }
        loss += sq / count;
    }
    Ok((loss / n, grad))
}

/// Guidance scale and the closed time interval on which it applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl GuidanceConfig {
    pub fn new(scale: f64, t_lo: f64, t_hi: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(NitError::Config(format!("guidance scale {scale} must be ≥ 1")));
        }
        if !(0.0..=1.0).contains(&t_lo) || !(0.0..=1.0).contains(&t_hi) || t_lo > t_hi {
            return Err(NitError::Config(format!("bad guidance interval [{t_lo}, {t_hi}]")));
        }
        Ok(Self { scale, t_lo, t_hi })
    }

    /// No guidance.
    pub fn none() -> Self {
        Self { scale: 1.0, t_lo: 0.0, t_hi: 1.0 }
    }

    /// Whether the unconditional branch is needed at time `t`.
    pub fn active(&self, t: f64) -> bool {
        self.scale != 1.0 && t >= self.t_lo && t <= self.t_hi
    }
}

/// `v_u + s·(v_c − v_u)` inside the interval, `v_c` outside.
pub fn cfg_velocity<T: Scalar>(v_cond: ArrayView2<T>, v_uncond: ArrayView2<T>, g: &GuidanceConfig, t: f64) -> Result<Array2<T>> {
    same_shape(&v_cond, &v_uncond, "cfg_velocity")?;
    if !g.active(t) {
        return Ok(v_cond.to_owned());
    }
    let s = T::of(g.scale);
    let mut out = v_uncond.to_owned();
    out.zip_mut_with(&v_cond, |u, &c| *u = *u + s * (c - *u));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(num_steps: usize, seed: u64) -> Result<Self> {
        if num_steps == 0 {
            return Err(NitError::Config("sampler needs at least one step".into()));
        }
        Ok(Self { num_steps, seed })
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 50, seed: 0 }
    }
}

/// Anything that predicts velocities for a packed batch of noisy tokens.
pub trait VelocityModel<T: Scalar> {
    fn latent_channels(&self) -> usize;
    fn patch_size(&self) -> usize;
    fn velocity(&self, x_t: ArrayView2<T>, layout: &PackedLayout, times: &[T], labels: &[Option<u32>]) -> Result<Array2<T>>;
}

impl<T: Scalar> VelocityModel<T> for NitParams<T> {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn velocity(&self, x_t: ArrayView2<T>, layout: &PackedLayout, times: &[T], labels: &[Option<u32>]) -> Result<Array2<T>> {
        self.forward_parts(x_t, layout, times, labels)
    }
}

/// One image to generate: latent height and width plus its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRequest {
    pub height: usize,
    pub width: usize,
    pub label: Option<u32>,
}

/// Integrates `dx/dt = v` from `t=1` to `t=0` for one latent of size `(h, w)`.
pub fn euler_sample<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    shape: (usize, usize),
    label: Option<u32>,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<LatentImage<T>> {
    let req = SampleRequest { height: shape.0, width: shape.1, label };
    Ok(euler_sample_batch(model, &[req], sampler, guidance)?.remove(0))
}

/// Samples several native-resolution latents in one packed sequence.
///
/// The unconditional branch, when guidance is active, rides along in the same
/// pack as extra instances.
pub fn euler_sample_batch<T: Scalar, M: VelocityModel<T>>(
    model: &M,
    requests: &[SampleRequest],
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<Vec<LatentImage<T>>> {
    if sampler.num_steps == 0 {
        return Err(NitError::Config("sampler needs at least one step".into()));
    }
    let p = model.patch_size();
    let c = model.latent_channels();
    let mut grids = Vec::with_capacity(requests.len());
    for r in requests {
        if r.height == 0 || r.width == 0 {
            return Err(NitError::Shape(format!("empty latent {}x{}", r.height, r.width)));
        }
        for (axis, size) in [("height", r.height), ("width", r.width)] {
            if size % p != 0 {
                return Err(NitError::NotDivisible { axis, size, factor: p });
            }
        }
        grids.push((r.height / p, r.width / p));
    }
    let layout = PackedLayout::from_grids(grids.clone())?;
    let cond_labels: Vec<Option<u32>> = requests.iter().map(|r| r.label).collect();
    let n = requests.len();
    let total = layout.total_tokens();
    let token_dim = c * p * p;

    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut x = Array2::from_shape_fn((total, token_dim), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::of(v)
    });

    // conditional and unconditional copies packed back to back
    let doubled_grids: Vec<_> = grids.iter().chain(grids.iter()).copied().collect();
    let doubled = PackedLayout::from_grids(doubled_grids)?;
    let mut doubled_labels = cond_labels.clone();
    doubled_labels.extend(std::iter::repeat_n(None, n));

    let dt = 1.0 / sampler.num_steps as f64;
    for k in (1..=sampler.num_steps).rev() {
        let t = k as f64 * dt;
        let v = if guidance.active(t) {
            let xx = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).expect("same width");
            let times = vec![T::of(t); 2 * n];
            let vv = model.velocity(xx.view(), &doubled, &times, &doubled_labels)?;
            cfg_velocity(vv.slice(s![..total, ..]), vv.slice(s![total.., ..]), guidance, t)?
        } else {
            model.velocity(x.view(), &layout, &vec![T::of(t); n], &cond_labels)?
        };
        let step = T::of(dt);
        x.zip_mut_with(&v, |a, &b| *a -= step * b);
    }

    let mut out = Vec::with_capacity(n);
    for ((r, req), &(gh, gw)) in layout.segments().zip(requests).zip(&grids) {
        let tokens = TokenMatrix::new(x.slice(s![r, ..]).to_owned(), (gh, gw), req.label)?;
        out.push(unpatchify(&tokens, gh * p, gw * p, p)?);
    }
    Ok(out)
}

/// Standard normal `rows × cols` matrix.
pub fn gaussian_noise<T: Scalar, R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let dist = Normal::new(0.0, 1.0).expect("unit std");
    Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)))
}
