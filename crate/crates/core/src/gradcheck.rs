//! Central finite-difference check of the model's analytic gradients.

use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::NitParams;
use crate::diffusion::{fm_loss, fm_loss_and_grad};
use crate::error::Result;
use crate::packing::PackedBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor so that vanishing gradients compare in absolute terms.
    pub abs_floor: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            samples_per_tensor: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.rel_err <= self.rel_tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap_or(std::cmp::Ordering::Equal))
    }
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (i, &d) in shape.iter().enumerate().rev() {
        idx[i] = flat % d;
        flat /= d;
    }
    idx
}

/// Compares backprop gradients of the flow-matching loss to central
/// differences on sampled coordinates of every tensor. The coordinate with
/// the largest analytic gradient is always included.
pub fn check_model_gradients(
    params: &NitParams<f64>,
    batch: &PackedBatch<f64>,
    target: &Array2<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let cu = batch.cu_seqlens().to_vec();
    let (pred, cache) = params.forward_cached(batch)?;
    let (_, dpred) = fm_loss_and_grad(pred.view(), target.view(), &cu)?;
    let grads = params.backward(&cache, dpred.view())?;
    let loss_at = |p: &NitParams<f64>| -> Result<f64> { fm_loss(p.forward(batch)?.view(), target.view(), &cu) };
    compare_gradients(params, &grads, loss_at, cfg)
}

fn compare_gradients(
    params: &NitParams<f64>,
    grads: &NitParams<f64>,
    loss_at: impl Fn(&NitParams<f64>) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut entries = Vec::new();

    for (ti, (name, g)) in grads.tensors().into_iter().enumerate() {
        let shape = g.shape().to_vec();
        let len = g.len();
        let mut picks: Vec<usize> = (0..cfg.samples_per_tensor.min(len)).map(|_| rng.random_range(0..len)).collect();
        let largest = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i);
        picks.extend(largest);
        picks.sort_unstable();
        picks.dedup();
        for flat in picks {
            let index = unravel(flat, &shape);
            let ix = IxDyn(&index);
            let original = params.tensors()[ti].1[&ix];
            probe.tensors_mut()[ti].1[&ix] = original + cfg.step;
            let plus = loss_at(&probe)?;
            probe.tensors_mut()[ti].1[&ix] = original - cfg.step;
            let minus = loss_at(&probe)?;
            probe.tensors_mut()[ti].1[&ix] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = g[&ix];
            let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                index,
                analytic,
                numeric,
                rel_err: (analytic - numeric).abs() / denom,
            });
        }
    }
    Ok(GradCheckReport { entries, rel_tol: cfg.rel_tol })
}
