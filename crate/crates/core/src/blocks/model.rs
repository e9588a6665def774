use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::NitConfig;
use super::embed::{patch_embed, LabelEmbedder, TimestepCache, TimestepEmbedder};
use super::nit::{block_backward, block_forward_cached, BlockCache, BlockParams, FinalCache, FinalLayer};
use crate::error::{NitError, Result};
use crate::nn::{silu, silu_grad, Linear};
use crate::packing::{PackedBatch, PackedLayout};
use crate::rope::{rope_for_packed, RopeTable};
use crate::scalar::Scalar;

/// Per-instance conditioning vectors `c_k = t_emb(t_k) + y_emb(label_k)` and
/// their SiLU, which every modulation projection consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet<T> {
    pub c: Array2<T>,
    pub silu_c: Array2<T>,
}

impl<T: Scalar> ConditionSet<T> {
    pub fn from_vectors(c: Array2<T>) -> Self {
        let silu_c = c.mapv(silu);
        Self { c, silu_c }
    }

    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.nrows() == 0
    }
}

/// All learnable weights of the class-conditional model.
#[derive(Debug, Clone, PartialEq)]
pub struct NitParams<T> {
    pub config: NitConfig,
    pub patch_embed: Linear<T>,
    pub t_embed: TimestepEmbedder<T>,
    pub y_embed: LabelEmbedder<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_layer: FinalLayer<T>,
}

/// Everything the backward pass needs from one forward.
pub struct ForwardCache<T> {
    tokens: Array2<T>,
    layout: PackedLayout,
    labels: Vec<Option<u32>>,
    rope: RopeTable<T>,
    cond: ConditionSet<T>,
    t_cache: TimestepCache<T>,
    blocks: Vec<BlockCache<T>>,
    final_cache: FinalCache<T>,
}

impl<T: Scalar> NitParams<T> {
    /// Xavier linears, N(0, 0.02) embeddings, zero modulation and output head.
    pub fn new<R: Rng + ?Sized>(config: NitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        Ok(Self {
            patch_embed: Linear::xavier(config.token_dim(), d, rng),
            t_embed: TimestepEmbedder::new(config.freq_dim, d, rng),
            y_embed: LabelEmbedder::new(config.num_classes, d, rng),
            blocks: (0..config.depth)
                .map(|_| BlockParams::new(d, config.mlp_hidden(), rng))
                .collect(),
            final_layer: FinalLayer::zeros(d, config.token_dim()),
            config,
        })
    }

    pub fn zeros(config: NitConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        Ok(Self {
            patch_embed: Linear::zeros(config.token_dim(), d),
            t_embed: TimestepEmbedder::zeros(config.freq_dim, d),
            y_embed: LabelEmbedder::zeros(config.num_classes, d),
            blocks: (0..config.depth)
                .map(|_| BlockParams::zeros(d, config.mlp_hidden()))
                .collect(),
            final_layer: FinalLayer::zeros(d, config.token_dim()),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    /// Overwrites every tensor with N(0, std²) draws, zero-initialized ones
    /// included.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("positive std");
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|_| T::of(dist.sample(rng)));
        }
    }

    fn linears(&self) -> Vec<(String, &Linear<T>)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("t_embed.mlp1".to_string(), &self.t_embed.mlp1),
            ("t_embed.mlp2".to_string(), &self.t_embed.mlp2),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.adaln"), &b.adaln));
            out.push((format!("blocks.{i}.attn.qkv"), &b.qkv));
            out.push((format!("blocks.{i}.attn.proj"), &b.proj));
            out.push((format!("blocks.{i}.mlp.fc1"), &b.fc1));
            out.push((format!("blocks.{i}.mlp.fc2"), &b.fc2));
        }
        out.push(("final.adaln".to_string(), &self.final_layer.adaln));
        out.push(("final.linear".to_string(), &self.final_layer.linear));
        out
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (name, l) in self.linears() {
            out.push((format!("{name}.weight"), l.weight.view().into_dyn()));
            out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
        }
        out.push(("y_embed.table".to_string(), self.y_embed.table.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same names and order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let Self {
            patch_embed,
            t_embed,
            y_embed,
            blocks,
            final_layer,
            ..
        } = self;
        let mut linears: Vec<(String, &mut Linear<T>)> = vec![
            ("patch_embed".to_string(), patch_embed),
            ("t_embed.mlp1".to_string(), &mut t_embed.mlp1),
            ("t_embed.mlp2".to_string(), &mut t_embed.mlp2),
        ];
        for (i, b) in blocks.iter_mut().enumerate() {
            let BlockParams { adaln, qkv, proj, fc1, fc2 } = b;
            linears.push((format!("blocks.{i}.adaln"), adaln));
            linears.push((format!("blocks.{i}.attn.qkv"), qkv));
            linears.push((format!("blocks.{i}.attn.proj"), proj));
            linears.push((format!("blocks.{i}.mlp.fc1"), fc1));
            linears.push((format!("blocks.{i}.mlp.fc2"), fc2));
        }
        let FinalLayer { adaln, linear } = final_layer;
        linears.push(("final.adaln".to_string(), adaln));
        linears.push(("final.linear".to_string(), linear));

        let mut out = Vec::new();
        for (name, l) in linears {
            let Linear { weight, bias } = l;
            out.push((format!("{name}.weight"), weight.view_mut().into_dyn()));
            out.push((format!("{name}.bias"), bias.view_mut().into_dyn()));
        }
        out.push(("y_embed.table".to_string(), y_embed.table.view_mut().into_dyn()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Builds `c_k` for every instance.
    pub fn conditions(&self, times: &[T], labels: &[Option<u32>]) -> Result<ConditionSet<T>> {
        Ok(self.conditions_cached(times, labels)?.0)
    }

    fn conditions_cached(&self, times: &[T], labels: &[Option<u32>]) -> Result<(ConditionSet<T>, TimestepCache<T>)> {
        if times.len() != labels.len() {
            return Err(NitError::Shape(format!("{} times but {} labels", times.len(), labels.len())));
        }
        let (t_emb, cache) = self.t_embed.forward(times)?;
        let c = t_emb + self.y_embed.embed_all(labels)?;
        Ok((ConditionSet::from_vectors(c), cache))
    }

    /// Velocity predictions for a packed batch (`Σ N_k × token_dim`).
    pub fn forward(&self, batch: &PackedBatch<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(batch)?.0)
    }

    /// Like [`Self::forward`] on explicit parts.
    pub fn forward_parts(
        &self,
        tokens: ArrayView2<T>,
        layout: &PackedLayout,
        times: &[T],
        labels: &[Option<u32>],
    ) -> Result<Array2<T>> {
        Ok(self.forward_parts_cached(tokens, layout, times, labels)?.0)
    }

    pub fn forward_cached(&self, batch: &PackedBatch<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.forward_parts_cached(batch.tokens.view(), &batch.layout, &batch.times, &batch.labels)
    }

    fn forward_parts_cached(
        &self,
        tokens: ArrayView2<T>,
        layout: &PackedLayout,
        times: &[T],
        labels: &[Option<u32>],
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        if tokens.nrows() != layout.total_tokens() {
            return Err(NitError::Layout(format!(
                "{} token rows but layout holds {}",
                tokens.nrows(),
                layout.total_tokens()
            )));
        }
        if times.len() != layout.num_instances() {
            return Err(NitError::Layout(format!(
                "{} times for {} instances",
                times.len(),
                layout.num_instances()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(NitError::NonFinite("model input tokens".into()));
        }
        let attn_cfg = self.config.attention()?;
        let rope = rope_for_packed(layout, &self.config.rope()?)?;
        let (cond, t_cache) = self.conditions_cached(times, labels)?;
        let mut z = patch_embed(tokens, &self.patch_embed)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = block_forward_cached(z.view(), &cond, layout, &rope, b, &attn_cfg)?;
            caches.push(cache);
            z = next;
        }
        let (out, final_cache) = self.final_layer.forward(z.view(), &cond, layout.cu_seqlens());
        let cache = ForwardCache {
            tokens: tokens.to_owned(),
            layout: layout.clone(),
            labels: labels.to_vec(),
            rope,
            cond,
            t_cache,
            blocks: caches,
            final_cache,
        };
        Ok((out, cache))
    }

    /// Parameter gradients given `dL/dprediction`.
    pub fn backward(&self, cache: &ForwardCache<T>, dpred: ArrayView2<T>) -> Result<NitParams<T>> {
        let attn_cfg = self.config.attention()?;
        let cu = cache.layout.cu_seqlens();
        let mut grad = self.zeros_like();
        let mut dsilu_c = Array2::zeros(cache.cond.c.raw_dim());
        let mut dz = self.final_layer.backward(
            &cache.final_cache,
            dpred,
            &cache.cond,
            cu,
            &mut grad.final_layer,
            &mut dsilu_c,
        );
        for (i, b) in self.blocks.iter().enumerate().rev() {
            dz = block_backward(
                &cache.blocks[i],
                dz.view(),
                &cache.cond,
                &cache.layout,
                &cache.rope,
                b,
                &attn_cfg,
                &mut grad.blocks[i],
                &mut dsilu_c,
            )?;
        }
        self.patch_embed
            .backward_params(cache.tokens.view(), dz.view(), &mut grad.patch_embed);
        let mut dc = dsilu_c;
        dc.zip_mut_with(&cache.cond.c, |g, &x| *g *= silu_grad(x));
        self.t_embed.backward(&cache.t_cache, dc.view(), &mut grad.t_embed);
        for (k, &label) in cache.labels.iter().enumerate() {
            let row = self.y_embed.row_index(label)?;
            let mut g = grad.y_embed.table.row_mut(row);
            g += &dc.row(k);
        }
        Ok(grad)
    }
}
