//! Text-conditioned block: low-rank time modulation and an extra
//! cross-attention sub-layer. Forward only.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::nit::packed_modulate;
use super::packed_gate;
use crate::attention::{cross_attention, packed_varlen_attention, qk_normalize, AttentionConfig};
use crate::error::{NitError, Result};
use crate::nn::{gelu_tanh, layer_norm, Linear, LN_EPS};
use crate::packing::{validate_cu_seqlens, PackedLayout};
use crate::rope::RopeTable;
use crate::scalar::Scalar;

/// `S = t_emb · W1 · W2` with `W1: d × r` and `W2: r × 9d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdaLn<T> {
    pub w1: Array2<T>,
    pub w2: Array2<T>,
}

impl<T: Scalar> LoraAdaLn<T> {
    /// Gaussian `W1`, zero `W2`.
    pub fn new<R: Rng + ?Sized>(d: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d {
            return Err(NitError::Config(format!("LoRA rank {rank} must lie in 1..={d}")));
        }
        let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
        Ok(Self {
            w1: Array2::from_shape_fn((d, rank), |_| T::of(dist.sample(rng))),
            w2: Array2::zeros((rank, 9 * d)),
        })
    }

    pub fn rank(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

/// Nine `n × d` chunks `[β1, β2, β3, γ1, γ2, γ3, α1, α2, α3]`.
pub fn lora_adaln_params<T: Scalar>(t_emb: ArrayView2<T>, lora: &LoraAdaLn<T>) -> Result<Vec<Array2<T>>> {
    let d = lora.w1.nrows();
    if t_emb.ncols() != d || lora.w2.ncols() != 9 * d || lora.w2.nrows() != lora.rank() {
        return Err(NitError::Shape(format!(
            "time embedding width {} incompatible with LoRA {}x{} / {}x{}",
            t_emb.ncols(),
            d,
            lora.rank(),
            lora.w2.nrows(),
            lora.w2.ncols()
        )));
    }
    let s_all = t_emb.dot(&lora.w1).dot(&lora.w2);
    Ok((0..9).map(|i| s_all.slice(s![.., i * d..(i + 1) * d]).to_owned()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct T2iBlockParams<T> {
    pub lora: LoraAdaLn<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub cross_q: Linear<T>,
    pub cross_kv: Linear<T>,
    pub cross_proj: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> T2iBlockParams<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, context_dim: usize, rank: usize, mlp_hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            lora: LoraAdaLn::new(d, rank, rng)?,
            qkv: Linear::xavier(d, 3 * d, rng),
            proj: Linear::xavier(d, d, rng),
            cross_q: Linear::xavier(d, d, rng),
            cross_kv: Linear::xavier(context_dim, 2 * d, rng),
            cross_proj: Linear::xavier(d, d, rng),
            fc1: Linear::xavier(d, mlp_hidden, rng),
            fc2: Linear::xavier(mlp_hidden, d, rng),
        })
    }

    pub fn num_params(&self) -> usize {
        self.lora.num_params()
            + [&self.qkv, &self.proj, &self.cross_q, &self.cross_kv, &self.cross_proj, &self.fc1, &self.fc2]
                .iter()
                .map(|l| l.num_params())
                .sum::<usize>()
    }
}

/// Parameter count of a class-conditional block of width `d`.
pub fn c2i_block_num_params(d: usize, mlp_ratio: f64) -> usize {
    let h = (d as f64 * mlp_ratio).round() as usize;
    (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
}

/// Parameter count of a text-conditioned block of width `d`.
pub fn t2i_block_num_params(d: usize, context_dim: usize, rank: usize, mlp_ratio: f64) -> usize {
    let h = (d as f64 * mlp_ratio).round() as usize;
    (d * rank + rank * 9 * d)
        + (d * 3 * d + 3 * d)
        + (d * d + d)
        + (d * d + d)
        + (context_dim * 2 * d + 2 * d)
        + (d * d + d)
        + (d * h + h)
        + (h * d + d)
}

/// Self-attention, cross-attention to the instance's own context segment,
/// then the MLP; each sub-layer modulated by `(β_i, γ_i)` and gated by `α_i`.
#[allow(clippy::too_many_arguments)]
pub fn t2i_block_forward<T: Scalar>(
    z: ArrayView2<T>,
    t_emb: ArrayView2<T>,
    layout: &PackedLayout,
    rope: &RopeTable<T>,
    context: ArrayView2<T>,
    context_cu_seqlens: &[i32],
    params: &T2iBlockParams<T>,
    attn_cfg: &AttentionConfig,
) -> Result<Array2<T>> {
    let cu = layout.cu_seqlens();
    validate_cu_seqlens(context_cu_seqlens)?;
    if context_cu_seqlens.len() != cu.len() {
        return Err(NitError::Layout(format!(
            "{} instances but {} context segments",
            layout.num_instances(),
            context_cu_seqlens.len() - 1
        )));
    }
    if z.nrows() != layout.total_tokens() || t_emb.nrows() != layout.num_instances() {
        return Err(NitError::Layout("t2i block inputs disagree with the layout".into()));
    }
    let d = attn_cfg.model_dim;
    let m = lora_adaln_params(t_emb, &params.lora)?;
    let (beta, gamma, alpha) = (&m[0..3], &m[3..6], &m[6..9]);

    // self-attention
    let (ln, _) = layer_norm(z, LN_EPS);
    let x = packed_modulate(ln.view(), beta[0].view(), gamma[0].view(), cu);
    let qkv = params.qkv.forward(x.view());
    let mut q = qkv.slice(s![.., 0..d]).to_owned();
    let mut k = qkv.slice(s![.., d..2 * d]).to_owned();
    let v = qkv.slice(s![.., 2 * d..]).to_owned();
    qk_normalize(&mut q, attn_cfg.num_heads, attn_cfg.qk_norm);
    qk_normalize(&mut k, attn_cfg.num_heads, attn_cfg.qk_norm);
    rope.rotate(q.view_mut());
    rope.rotate(k.view_mut());
    let a = params.proj.forward(packed_varlen_attention(q.view(), k.view(), v.view(), cu, attn_cfg)?.view());
    let h1 = &z + &packed_gate(a.view(), alpha[0].view(), cu);

    // cross-attention, no positions on either side
    let (ln, _) = layer_norm(h1.view(), LN_EPS);
    let x = packed_modulate(ln.view(), beta[1].view(), gamma[1].view(), cu);
    let mut q = params.cross_q.forward(x.view());
    let kv = params.cross_kv.forward(context);
    let mut k = kv.slice(s![.., 0..d]).to_owned();
    let v = kv.slice(s![.., d..]).to_owned();
    qk_normalize(&mut q, attn_cfg.num_heads, attn_cfg.qk_norm);
    qk_normalize(&mut k, attn_cfg.num_heads, attn_cfg.qk_norm);
    let c = cross_attention(q.view(), k.view(), v.view(), cu, context_cu_seqlens, attn_cfg)?;
    let c = params.cross_proj.forward(c.view());
    let h2 = &h1 + &packed_gate(c.view(), alpha[1].view(), cu);

    // MLP
    let (ln, _) = layer_norm(h2.view(), LN_EPS);
    let x = packed_modulate(ln.view(), beta[2].view(), gamma[2].view(), cu);
    let f = params.fc2.forward(params.fc1.forward(x.view()).mapv(gelu_tanh).view());
    Ok(&h2 + &packed_gate(f.view(), alpha[2].view(), cu))
}
