//! Transformer blocks, embeddings and the full conditional model.

mod config;
mod embed;
mod model;
mod nit;
mod t2i;

pub use config::NitConfig;
pub use embed::{
    apply_label_drop, patch_embed, timestep_frequencies, LabelEmbedder, TimestepEmbedder,
    TIME_SCALE,
};
pub use model::{ConditionSet, ForwardCache, NitParams};
pub use nit::{
    adaln_params, final_layer, nit_block_forward, packed_modulate, AdaLnParams, BlockCache,
    BlockParams, FinalLayer,
};
pub use t2i::{
    c2i_block_num_params, lora_adaln_params, t2i_block_forward, t2i_block_num_params, LoraAdaLn,
    T2iBlockParams,
};

use ndarray::{s, Array2, ArrayView2};

use crate::packing::segment_ranges;
use crate::scalar::Scalar;

/// Expands per-instance rows (`n × d`) to per-token rows (`N × d`).
pub fn broadcast_rows<T: Scalar>(per_instance: ArrayView2<T>, cu_seqlens: &[i32]) -> Array2<T> {
    let total = *cu_seqlens.last().unwrap_or(&0) as usize;
    let mut out = Array2::zeros((total, per_instance.ncols()));
    for (k, r) in segment_ranges(cu_seqlens).enumerate() {
        out.slice_mut(s![r, ..]).assign(&per_instance.row(k));
    }
    out
}

/// Sums token rows within each instance segment (`N × d` to `n × d`).
pub fn segment_sum<T: Scalar>(x: ArrayView2<T>, cu_seqlens: &[i32]) -> Array2<T> {
    let n = cu_seqlens.len().saturating_sub(1);
    let mut out = Array2::zeros((n, x.ncols()));
    for (k, r) in segment_ranges(cu_seqlens).enumerate() {
        for row in x.slice(s![r, ..]).outer_iter() {
            let mut o = out.row_mut(k);
            o += &row;
        }
    }
    out
}

/// `x ⊙ gate_k` for every row of instance `k`.
pub fn packed_gate<T: Scalar>(x: ArrayView2<T>, gate: ArrayView2<T>, cu_seqlens: &[i32]) -> Array2<T> {
    let mut out = x.to_owned();
    for (k, r) in segment_ranges(cu_seqlens).enumerate() {
        let g = gate.row(k);
        for mut row in out.slice_mut(s![r, ..]).outer_iter_mut() {
            row *= &g;
        }
    }
    out
}
