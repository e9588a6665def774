use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::model::ConditionSet;
use super::{packed_gate, segment_sum};
use crate::attention::{
    qk_normalize, qk_normalize_backward, varlen_attention_backward, varlen_attention_forward,
    AttentionConfig, AttentionOutput,
};
use crate::error::{NitError, Result};
use crate::nn::{gelu_tanh, gelu_tanh_grad, layer_norm, layer_norm_backward, Linear, LN_EPS};
use crate::packing::{segment_ranges, PackedLayout};
use crate::rope::RopeTable;
use crate::scalar::Scalar;

/// Per-instance modulation chunks, each `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnParams<T> {
    pub shift_msa: Array2<T>,
    pub scale_msa: Array2<T>,
    pub gate_msa: Array2<T>,
    pub shift_mlp: Array2<T>,
    pub scale_mlp: Array2<T>,
    pub gate_mlp: Array2<T>,
}

impl<T: Scalar> AdaLnParams<T> {
    /// Splits an `n × 6d` projection into its six chunks.
    pub fn split(m: ArrayView2<T>) -> Self {
        let d = m.ncols() / 6;
        let chunk = |i: usize| m.slice(s![.., i * d..(i + 1) * d]).to_owned();
        Self {
            shift_msa: chunk(0),
            scale_msa: chunk(1),
            gate_msa: chunk(2),
            shift_mlp: chunk(3),
            scale_mlp: chunk(4),
            gate_mlp: chunk(5),
        }
    }

    fn join(&self) -> Array2<T> {
        concatenate(
            Axis(1),
            &[
                self.shift_msa.view(),
                self.scale_msa.view(),
                self.gate_msa.view(),
                self.shift_mlp.view(),
                self.scale_mlp.view(),
                self.gate_mlp.view(),
            ],
        )
        .expect("equal row counts")
    }
}

/// SiLU-activated conditions (`n × d`) projected to the six modulation
/// chunks.
pub fn adaln_params<T: Scalar>(silu_c: ArrayView2<T>, proj: &Linear<T>) -> AdaLnParams<T> {
    AdaLnParams::split(proj.forward(silu_c).view())
}

/// `ẑ ⊙ (1 + scale_k) + shift_k` for every row of instance `k`.
pub fn packed_modulate<T: Scalar>(
    z_hat: ArrayView2<T>,
    shift: ArrayView2<T>,
    scale: ArrayView2<T>,
    cu_seqlens: &[i32],
) -> Array2<T> {
    let mut out = z_hat.to_owned();
    for (k, r) in segment_ranges(cu_seqlens).enumerate() {
        let gain = scale.row(k).mapv(|v| T::one() + v);
        let sh = shift.row(k);
        for mut row in out.slice_mut(s![r, ..]).outer_iter_mut() {
            row *= &gain;
            row += &sh;
        }
    }
    out
}

/// Gradients of [`packed_modulate`]: `(d z_hat, d shift, d scale)`.
fn packed_modulate_backward<T: Scalar>(
    z_hat: ArrayView2<T>,
    scale: ArrayView2<T>,
    dout: ArrayView2<T>,
    cu_seqlens: &[i32],
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dshift = segment_sum(dout, cu_seqlens);
    let dscale = segment_sum((&dout * &z_hat).view(), cu_seqlens);
    let gain = scale.mapv(|v| T::one() + v);
    let dz = packed_gate(dout, gain.view(), cu_seqlens);
    (dz, dshift, dscale)
}

/// Weights of one class-conditional block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub adaln: Linear<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> BlockParams<T> {
    /// Xavier linears with a zero modulation projection.
    pub fn new<R: Rng + ?Sized>(d: usize, mlp_hidden: usize, rng: &mut R) -> Self {
        Self {
            adaln: Linear::zeros(d, 6 * d),
            qkv: Linear::xavier(d, 3 * d, rng),
            proj: Linear::xavier(d, d, rng),
            fc1: Linear::xavier(d, mlp_hidden, rng),
            fc2: Linear::xavier(mlp_hidden, d, rng),
        }
    }

    pub fn zeros(d: usize, mlp_hidden: usize) -> Self {
        Self {
            adaln: Linear::zeros(d, 6 * d),
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            fc1: Linear::zeros(d, mlp_hidden),
            fc2: Linear::zeros(mlp_hidden, d),
        }
    }

    pub fn num_params(&self) -> usize {
        [&self.adaln, &self.qkv, &self.proj, &self.fc1, &self.fc2]
            .iter()
            .map(|l| l.num_params())
            .sum()
    }
}

/// Intermediates saved by the block forward for its backward.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ada: AdaLnParams<T>,
    ln1: Array2<T>,
    inv1: Array1<T>,
    attn_in: Array2<T>,
    q_normed: Option<(Array2<T>, Array2<T>)>,
    k_normed: Option<(Array2<T>, Array2<T>)>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: AttentionOutput<T>,
    attn_out: Array2<T>,
    ln2: Array2<T>,
    inv2: Array1<T>,
    mlp_in: Array2<T>,
    pre_gelu: Array2<T>,
    hidden: Array2<T>,
    mlp_out: Array2<T>,
}

fn check_block_inputs<T: Scalar>(z: ArrayView2<T>, cond: &ConditionSet<T>, layout: &PackedLayout, rope: &RopeTable<T>) -> Result<()> {
    if z.nrows() != layout.total_tokens() || rope.rows() != z.nrows() {
        return Err(NitError::Layout(format!(
            "{} hidden rows, {} layout tokens, {} rope rows",
            z.nrows(),
            layout.total_tokens(),
            rope.rows()
        )));
    }
    if cond.len() != layout.num_instances() {
        return Err(NitError::Layout(format!(
            "{} conditions for {} instances",
            cond.len(),
            layout.num_instances()
        )));
    }
    Ok(())
}

/// One block: gated attention then gated MLP, each on a modulated LayerNorm.
pub fn nit_block_forward<T: Scalar>(
    z: ArrayView2<T>,
    cond: &ConditionSet<T>,
    layout: &PackedLayout,
    rope: &RopeTable<T>,
    params: &BlockParams<T>,
    attn_cfg: &AttentionConfig,
) -> Result<Array2<T>> {
    Ok(block_forward_cached(z, cond, layout, rope, params, attn_cfg)?.0)
}

pub(crate) fn block_forward_cached<T: Scalar>(
    z: ArrayView2<T>,
    cond: &ConditionSet<T>,
    layout: &PackedLayout,
    rope: &RopeTable<T>,
    params: &BlockParams<T>,
    attn_cfg: &AttentionConfig,
) -> Result<(Array2<T>, BlockCache<T>)> {
    check_block_inputs(z, cond, layout, rope)?;
    let cu = layout.cu_seqlens();
    let d = attn_cfg.model_dim;
    let ada = adaln_params(cond.silu_c.view(), &params.adaln);

    let (ln1, inv1) = layer_norm(z, LN_EPS);
    let attn_in = packed_modulate(ln1.view(), ada.shift_msa.view(), ada.scale_msa.view(), cu);
    let qkv = params.qkv.forward(attn_in.view());
    let mut q = qkv.slice(s![.., 0..d]).to_owned();
    let mut k = qkv.slice(s![.., d..2 * d]).to_owned();
    let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();
    let q_inv = qk_normalize(&mut q, attn_cfg.num_heads, attn_cfg.qk_norm);
    let k_inv = qk_normalize(&mut k, attn_cfg.num_heads, attn_cfg.qk_norm);
    let q_normed = q_inv.map(|inv| (q.clone(), inv));
    let k_normed = k_inv.map(|inv| (k.clone(), inv));
    rope.rotate(q.view_mut());
    rope.rotate(k.view_mut());
    let attn = varlen_attention_forward(q.view(), k.view(), v.view(), cu, cu, attn_cfg)?;
    let attn_out = params.proj.forward(attn.out.view());
    let h1 = &z + &packed_gate(attn_out.view(), ada.gate_msa.view(), cu);

    let (ln2, inv2) = layer_norm(h1.view(), LN_EPS);
    let mlp_in = packed_modulate(ln2.view(), ada.shift_mlp.view(), ada.scale_mlp.view(), cu);
    let pre_gelu = params.fc1.forward(mlp_in.view());
    let hidden = pre_gelu.mapv(gelu_tanh);
    let mlp_out = params.fc2.forward(hidden.view());
    let out = &h1 + &packed_gate(mlp_out.view(), ada.gate_mlp.view(), cu);

    let cache = BlockCache {
        ada,
        ln1,
        inv1,
        attn_in,
        q_normed,
        k_normed,
        q,
        k,
        v,
        attn,
        attn_out,
        ln2,
        inv2,
        mlp_in,
        pre_gelu,
        hidden,
        mlp_out,
    };
    Ok((out, cache))
}

/// Returns `d z` and accumulates parameter grads; `d silu_c` is added to
/// `dsilu_c`.
pub(crate) fn block_backward<T: Scalar>(
    cache: &BlockCache<T>,
    dout: ArrayView2<T>,
    cond: &ConditionSet<T>,
    layout: &PackedLayout,
    rope: &RopeTable<T>,
    params: &BlockParams<T>,
    attn_cfg: &AttentionConfig,
    grad: &mut BlockParams<T>,
    dsilu_c: &mut Array2<T>,
) -> Result<Array2<T>> {
    let cu = layout.cu_seqlens();
    let ada = &cache.ada;

    // MLP branch
    let mut dh1 = dout.to_owned();
    let dgate_mlp = segment_sum((&dout * &cache.mlp_out).view(), cu);
    let dmlp_out = packed_gate(dout, ada.gate_mlp.view(), cu);
    let mut dhidden = params.fc2.backward(cache.hidden.view(), dmlp_out.view(), &mut grad.fc2);
    dhidden.zip_mut_with(&cache.pre_gelu, |g, &x| *g *= gelu_tanh_grad(x));
    let dmlp_in = params.fc1.backward(cache.mlp_in.view(), dhidden.view(), &mut grad.fc1);
    let (dln2, dshift_mlp, dscale_mlp) =
        packed_modulate_backward(cache.ln2.view(), ada.scale_mlp.view(), dmlp_in.view(), cu);
    dh1 += &layer_norm_backward(cache.ln2.view(), &cache.inv2, dln2.view());

    // attention branch
    let dgate_msa = segment_sum((&dh1 * &cache.attn_out).view(), cu);
    let dattn_out = packed_gate(dh1.view(), ada.gate_msa.view(), cu);
    let dattn = params.proj.backward(cache.attn.out.view(), dattn_out.view(), &mut grad.proj);
    let (mut dq, mut dk, dv) = varlen_attention_backward(
        cache.q.view(),
        cache.k.view(),
        cache.v.view(),
        &cache.attn,
        dattn.view(),
        cu,
        cu,
        attn_cfg,
    )?;
    rope.rotate_inverse(dq.view_mut());
    rope.rotate_inverse(dk.view_mut());
    if let Some((y, inv)) = &cache.q_normed {
        dq = qk_normalize_backward(y.view(), inv, dq.view());
    }
    if let Some((y, inv)) = &cache.k_normed {
        dk = qk_normalize_backward(y.view(), inv, dk.view());
    }
    let dqkv = concatenate(Axis(1), &[dq.view(), dk.view(), dv.view()]).expect("equal rows");
    let dattn_in = params.qkv.backward(cache.attn_in.view(), dqkv.view(), &mut grad.qkv);
    let (dln1, dshift_msa, dscale_msa) =
        packed_modulate_backward(cache.ln1.view(), ada.scale_msa.view(), dattn_in.view(), cu);
    let dz = dh1 + layer_norm_backward(cache.ln1.view(), &cache.inv1, dln1.view());

    let dada = AdaLnParams {
        shift_msa: dshift_msa,
        scale_msa: dscale_msa,
        gate_msa: dgate_msa,
        shift_mlp: dshift_mlp,
        scale_mlp: dscale_mlp,
        gate_mlp: dgate_mlp,
    }
    .join();
    *dsilu_c += &params.adaln.backward(cond.silu_c.view(), dada.view(), &mut grad.adaln);
    Ok(dz)
}

/// Output head: modulated LayerNorm then a linear map to token space.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer<T> {
    pub adaln: Linear<T>,
    pub linear: Linear<T>,
}

pub(crate) struct FinalCache<T> {
    scale: Array2<T>,
    ln: Array2<T>,
    inv: Array1<T>,
    modulated: Array2<T>,
}

impl<T: Scalar> FinalLayer<T> {
    /// Both projections zero, so the untrained model predicts zero velocity.
    pub fn zeros(d: usize, token_dim: usize) -> Self {
        Self {
            adaln: Linear::zeros(d, 2 * d),
            linear: Linear::zeros(d, token_dim),
        }
    }

    pub fn num_params(&self) -> usize {
        self.adaln.num_params() + self.linear.num_params()
    }

    pub(crate) fn forward(
        &self,
        z: ArrayView2<T>,
        cond: &ConditionSet<T>,
        cu: &[i32],
    ) -> (Array2<T>, FinalCache<T>) {
        let d = z.ncols();
        let m = self.adaln.forward(cond.silu_c.view());
        let shift = m.slice(s![.., 0..d]).to_owned();
        let scale = m.slice(s![.., d..2 * d]).to_owned();
        let (ln, inv) = layer_norm(z, LN_EPS);
        let modulated = packed_modulate(ln.view(), shift.view(), scale.view(), cu);
        let out = self.linear.forward(modulated.view());
        (out, FinalCache { scale, ln, inv, modulated })
    }

    pub(crate) fn backward(
        &self,
        cache: &FinalCache<T>,
        dout: ArrayView2<T>,
        cond: &ConditionSet<T>,
        cu: &[i32],
        grad: &mut Self,
        dsilu_c: &mut Array2<T>,
    ) -> Array2<T> {
        let dmod = self.linear.backward(cache.modulated.view(), dout, &mut grad.linear);
        let (dln, dshift, dscale) = packed_modulate_backward(cache.ln.view(), cache.scale.view(), dmod.view(), cu);
        let dm = concatenate(Axis(1), &[dshift.view(), dscale.view()]).expect("equal rows");
        *dsilu_c += &self.adaln.backward(cond.silu_c.view(), dm.view(), &mut grad.adaln);
        layer_norm_backward(cache.ln.view(), &cache.inv, dln.view())
    }
}

/// Token-space predictions, `Σ N_k × c·p²`.
pub fn final_layer<T: Scalar>(
    z: ArrayView2<T>,
    cond: &ConditionSet<T>,
    layout: &PackedLayout,
    params: &FinalLayer<T>,
) -> Result<Array2<T>> {
    if z.nrows() != layout.total_tokens() || cond.len() != layout.num_instances() {
        return Err(NitError::Layout("final layer inputs disagree with the layout".into()));
    }
    Ok(params.forward(z, cond, layout.cu_seqlens()).0)
}
