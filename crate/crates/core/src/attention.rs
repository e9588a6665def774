//! Block-diagonal multi-head attention over packed sequences.
//!
//! Two implementations share one contract:
//!
//! * [`reference_attention`] materializes the full `N × N` score matrix per
//!   head with an explicit block-diagonal mask. It exists as an oracle.
//! * [`packed_varlen_attention`] walks the instance segments given by
//!   `cu_seqlens` and runs a tiled streaming softmax (running max and running
//!   denominator over key tiles) inside each segment. Peak scratch memory is
//!   `segment_len × tile` per head and no mask is ever built.
//!
//! Inputs and outputs use the caller's scalar type; scores, the softmax
//! statistics and the value accumulator are kept in `f64`.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{NitError, Result};
use crate::nn::{layer_norm, layer_norm_backward, LN_EPS};
use crate::packing::{segment_ranges, validate_cu_seqlens};
use crate::scalar::Scalar;

pub const DEFAULT_TILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub qk_norm: bool,
    /// Key tile length of the streaming kernel.
    pub tile_size: usize,
    /// Declared for parity with the reference block; only 0 is supported.
    pub attn_drop: f64,
    pub proj_drop: f64,
    /// Self-test hook: negates the score scale inside the streaming kernel.
    pub inject_sign_flip: bool,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
            qk_norm: false,
            tile_size: DEFAULT_TILE,
            attn_drop: 0.0,
            proj_drop: 0.0,
            inject_sign_flip: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_qk_norm(mut self, on: bool) -> Self {
        self.qk_norm = on;
        self
    }

    pub fn with_tile(mut self, tile: usize) -> Self {
        self.tile_size = tile;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(NitError::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        let hd = self.head_dim();
        if hd == 0 || hd % 4 != 0 {
            return Err(NitError::Config(format!("head dim {hd} must be a positive multiple of 4")));
        }
        if self.tile_size == 0 {
            return Err(NitError::Config("tile size must be positive".into()));
        }
        if self.attn_drop != 0.0 || self.proj_drop != 0.0 {
            return Err(NitError::Config("attention dropout is not supported".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).powf(-0.5)
    }
}

/// Per-head layer normalization over `head_dim` with no affine.
///
/// Returns the per-(row, head) inverse standard deviations for the backward,
/// or `None` when normalization is disabled and `x` is left untouched.
pub fn qk_normalize<T: Scalar>(x: &mut Array2<T>, num_heads: usize, enabled: bool) -> Option<Array2<T>> {
    if !enabled {
        return None;
    }
    let hd = x.ncols() / num_heads;
    let mut inv = Array2::zeros((x.nrows(), num_heads));
    for h in 0..num_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (y, r) = layer_norm(x.slice(cols), LN_EPS);
        x.slice_mut(cols).assign(&y);
        inv.column_mut(h).assign(&r);
    }
    Some(inv)
}

/// Backward of [`qk_normalize`] given its normalized output.
pub fn qk_normalize_backward<T: Scalar>(y: ArrayView2<T>, inv: &Array2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let num_heads = inv.ncols();
    let hd = y.ncols() / num_heads;
    let mut dx = Array2::zeros(y.raw_dim());
    for h in 0..num_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let r = inv.column(h).to_owned();
        dx.slice_mut(cols)
            .assign(&layer_norm_backward(y.slice(cols), &r, dy.slice(cols)));
    }
    dx
}

/// Output of the streaming kernel plus the per-row log-sum-exp of the scaled
/// scores (`rows × heads`), which is what the backward pass needs.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub out: Array2<T>,
    pub lse: Array2<f64>,
}

fn check_inputs<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    q_cu: &[i32],
    kv_cu: &[i32],
    cfg: &AttentionConfig,
) -> Result<()> {
    cfg.validate()?;
    validate_cu_seqlens(q_cu)?;
    validate_cu_seqlens(kv_cu)?;
    if q_cu.len() != kv_cu.len() {
        return Err(NitError::Layout(format!(
            "{} query segments but {} key/value segments",
            q_cu.len() - 1,
            kv_cu.len() - 1
        )));
    }
    let d = cfg.model_dim;
    if q.ncols() != d || k.ncols() != d || v.ncols() != d {
        return Err(NitError::Shape(format!(
            "q/k/v widths {}/{}/{} do not match model dim {d}",
            q.ncols(),
            k.ncols(),
            v.ncols()
        )));
    }
    if q.nrows() != *q_cu.last().unwrap() as usize {
        return Err(NitError::Layout(format!("{} query rows but cu_seqlens ends at {}", q.nrows(), q_cu.last().unwrap())));
    }
    if k.nrows() != *kv_cu.last().unwrap() as usize || v.nrows() != k.nrows() {
        return Err(NitError::Layout(format!(
            "{} key / {} value rows but cu_seqlens ends at {}",
            k.nrows(),
            v.nrows(),
            kv_cu.last().unwrap()
        )));
    }
    for (name, m) in [("q", q), ("k", k), ("v", v)] {
        if m.iter().any(|x| x.is_nan()) {
            return Err(NitError::NonFinite(format!("attention input {name}")));
        }
    }
    Ok(())
}

fn head_block<T: Scalar>(x: ArrayView2<T>, rows: Range<usize>, head: usize, hd: usize) -> Array2<f64> {
    x.slice(s![rows, head * hd..(head + 1) * hd]).mapv(|v| v.as_f64())
}

/// Dense masked attention: `softmax(scale·QKᵀ + M)·V` with `M` zero inside an
/// instance and `−∞` across instances.
pub fn reference_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    cu_seqlens: &[i32],
    cfg: &AttentionConfig,
) -> Result<Array2<T>> {
    reference_cross_attention(q, k, v, cu_seqlens, cu_seqlens, cfg)
}

/// Dense masked attention where query segment `i` may only see key/value
/// segment `i`.
pub fn reference_cross_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    q_cu: &[i32],
    kv_cu: &[i32],
    cfg: &AttentionConfig,
) -> Result<Array2<T>> {
    check_inputs(q, k, v, q_cu, kv_cu, cfg)?;
    let hd = cfg.head_dim();
    let mut out = Array2::zeros((q.nrows(), cfg.model_dim));
    for h in 0..cfg.num_heads {
        let p = masked_probs(q, k, q_cu, kv_cu, cfg, h);
        let vh = head_block(v, 0..v.nrows(), h, hd);
        let o = p.dot(&vh);
        out.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&o.mapv(T::of));
    }
    Ok(out)
}

/// Full row-stochastic attention matrix of one head, mask included.
pub fn reference_attention_probs<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    cu_seqlens: &[i32],
    cfg: &AttentionConfig,
    head: usize,
) -> Result<Array2<f64>> {
    check_inputs(q, k, k, cu_seqlens, cu_seqlens, cfg)?;
    Ok(masked_probs(q, k, cu_seqlens, cu_seqlens, cfg, head))
}

fn masked_probs<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    q_cu: &[i32],
    kv_cu: &[i32],
    cfg: &AttentionConfig,
    h: usize,
) -> Array2<f64> {
    let hd = cfg.head_dim();
    let qh = head_block(q, 0..q.nrows(), h, hd);
    let kh = head_block(k, 0..k.nrows(), h, hd);
    let mut scores = qh.dot(&kh.t()) * cfg.scale();
    let mut mask = Array2::from_elem(scores.raw_dim(), f64::NEG_INFINITY);
    for (qr, kr) in segment_ranges(q_cu).zip(segment_ranges(kv_cu)) {
        mask.slice_mut(s![qr, kr]).fill(0.0);
    }
    scores += &mask;
    for mut row in scores.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    scores
}

/// Streaming varlen self-attention.
pub fn packed_varlen_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    cu_seqlens: &[i32],
    cfg: &AttentionConfig,
) -> Result<Array2<T>> {
    Ok(varlen_attention_forward(q, k, v, cu_seqlens, cu_seqlens, cfg)?.out)
}

/// Streaming varlen cross-attention: query segment `i` attends to key/value
/// segment `i` only.
pub fn cross_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    q_cu: &[i32],
    kv_cu: &[i32],
    cfg: &AttentionConfig,
) -> Result<Array2<T>> {
    Ok(varlen_attention_forward(q, k, v, q_cu, kv_cu, cfg)?.out)
}

/// Streaming kernel shared by self- and cross-attention.
pub fn varlen_attention_forward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    q_cu: &[i32],
    kv_cu: &[i32],
    cfg: &AttentionConfig,
) -> Result<AttentionOutput<T>> {
    check_inputs(q, k, v, q_cu, kv_cu, cfg)?;
    let hd = cfg.head_dim();
    let scale = if cfg.inject_sign_flip { -cfg.scale() } else { cfg.scale() };
    let mut out = Array2::zeros((q.nrows(), cfg.model_dim));
    let mut lse = Array2::zeros((q.nrows(), cfg.num_heads));
    for (qr, kr) in segment_ranges(q_cu).zip(segment_ranges(kv_cu)) {
        let n = qr.len();
        for h in 0..cfg.num_heads {
            let qs = head_block(q, qr.clone(), h, hd) * scale;
            let mut run_max = vec![f64::NEG_INFINITY; n];
            let mut denom = vec![0.0f64; n];
            let mut acc = Array2::<f64>::zeros((n, hd));
            let mut t0 = kr.start;
            while t0 < kr.end {
                let t1 = (t0 + cfg.tile_size).min(kr.end);
                let kt = head_block(k, t0..t1, h, hd);
                let vt = head_block(v, t0..t1, h, hd);
                let mut p = qs.dot(&kt.t());
                for (i, mut row) in p.outer_iter_mut().enumerate() {
                    let tile_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let m_new = run_max[i].max(tile_max);
                    let correction = (run_max[i] - m_new).exp();
                    row.mapv_inplace(|x| (x - m_new).exp());
                    denom[i] = denom[i] * correction + row.sum();
                    acc.row_mut(i).mapv_inplace(|a| a * correction);
                    run_max[i] = m_new;
                }
                acc += &p.dot(&vt);
                t0 = t1;
            }
            for (i, mut row) in acc.outer_iter_mut().enumerate() {
                row /= denom[i];
                lse[[qr.start + i, h]] = run_max[i] + denom[i].ln();
            }
            out.slice_mut(s![qr.clone(), h * hd..(h + 1) * hd])
                .assign(&acc.mapv(T::of));
        }
    }
    Ok(AttentionOutput { out, lse })
}

/// Gradients of the streaming kernel with respect to `q`, `k` and `v`.
///
/// Probabilities are recomputed per segment from the saved log-sum-exp.
pub fn varlen_attention_backward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    fwd: &AttentionOutput<T>,
    dout: ArrayView2<T>,
    q_cu: &[i32],
    kv_cu: &[i32],
    cfg: &AttentionConfig,
) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
    check_inputs(q, k, v, q_cu, kv_cu, cfg)?;
    let hd = cfg.head_dim();
    let scale = cfg.scale();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let out = fwd.out.view();
    for (qr, kr) in segment_ranges(q_cu).zip(segment_ranges(kv_cu)) {
        for h in 0..cfg.num_heads {
            let cols = h * hd..(h + 1) * hd;
            let qs = head_block(q, qr.clone(), h, hd);
            let ks = head_block(k, kr.clone(), h, hd);
            let vs = head_block(v, kr.clone(), h, hd);
            let os = head_block(out, qr.clone(), h, hd);
            let dos = head_block(dout, qr.clone(), h, hd);
            let mut p = qs.dot(&ks.t()) * scale;
            for (i, mut row) in p.outer_iter_mut().enumerate() {
                let l = fwd.lse[[qr.start + i, h]];
                row.mapv_inplace(|x| (x - l).exp());
            }
            let dvs = p.t().dot(&dos);
            let dp = dos.dot(&vs.t());
            let delta = (&dos * &os).sum_axis(Axis(1));
            let mut ds = dp;
            for ((mut row, prow), &d) in ds.outer_iter_mut().zip(p.outer_iter()).zip(delta.iter()) {
                row.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - d));
            }
            let dqs = ds.dot(&ks) * scale;
            let dks = ds.t().dot(&qs) * scale;
            dq.slice_mut(s![qr.clone(), cols.clone()]).assign(&dqs.mapv(T::of));
            dk.slice_mut(s![kr.clone(), cols.clone()]).assign(&dks.mapv(T::of));
            dv.slice_mut(s![kr.clone(), cols]).assign(&dvs.mapv(T::of));
        }
    }
    Ok((dq, dk, dv))
}
