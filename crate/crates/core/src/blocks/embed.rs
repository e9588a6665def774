use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NitError, Result};
use crate::nn::{silu, silu_grad, Linear};
use crate::scalar::Scalar;

/// Flow times in `[0, 1]` are stretched to this range before the sinusoids,
/// so the frequency ladder covers the same span as integer diffusion steps.
pub const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Row-wise affine projection of tokens into the hidden width.
pub fn patch_embed<T: Scalar>(tokens: ArrayView2<T>, proj: &Linear<T>) -> Result<Array2<T>> {
    if tokens.ncols() != proj.fan_in() {
        return Err(NitError::Shape(format!(
            "token dim {} does not match patch embedding input {}",
            tokens.ncols(),
            proj.fan_in()
        )));
    }
    Ok(proj.forward(tokens))
}

/// `[cos(s·t·f_i), sin(s·t·f_i)]` with `f_i = MAX_PERIOD^(−i/half)`.
pub fn timestep_frequencies(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let st = t * TIME_SCALE;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (st * f).sin_cos();
        out[i] = c;
        out[half + i] = s;
    }
    out
}

/// Sinusoidal features followed by `Linear → SiLU → Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedder<T> {
    pub freq_dim: usize,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

pub(crate) struct TimestepCache<T> {
    freqs: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> TimestepEmbedder<T> {
    pub fn new<R: Rng + ?Sized>(freq_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            freq_dim,
            mlp1: Linear::normal(freq_dim, hidden, 0.02, rng),
            mlp2: Linear::normal(hidden, hidden, 0.02, rng),
        }
    }

    pub fn zeros(freq_dim: usize, hidden: usize) -> Self {
        Self {
            freq_dim,
            mlp1: Linear::zeros(freq_dim, hidden),
            mlp2: Linear::zeros(hidden, hidden),
        }
    }

    /// One embedding row per timestep.
    pub fn embed(&self, times: &[T]) -> Result<Array2<T>> {
        Ok(self.forward(times)?.0)
    }

    pub(crate) fn forward(&self, times: &[T]) -> Result<(Array2<T>, TimestepCache<T>)> {
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(NitError::NonFinite(format!("timestep {t}")));
        }
        let mut freqs = Array2::zeros((times.len(), self.freq_dim));
        for (mut row, &t) in freqs.outer_iter_mut().zip(times) {
            for (o, v) in row.iter_mut().zip(timestep_frequencies(t.as_f64(), self.freq_dim)) {
                *o = T::of(v);
            }
        }
        let pre_act = self.mlp1.forward(freqs.view());
        let act = pre_act.mapv(silu);
        let out = self.mlp2.forward(act.view());
        Ok((out, TimestepCache { freqs, pre_act, act }))
    }

    pub(crate) fn backward(&self, cache: &TimestepCache<T>, dout: ArrayView2<T>, grad: &mut Self) {
        let mut da = self.mlp2.backward(cache.act.view(), dout, &mut grad.mlp2);
        da.zip_mut_with(&cache.pre_act, |g, &x| *g *= silu_grad(x));
        self.mlp1.backward_params(cache.freqs.view(), da.view(), &mut grad.mlp1);
    }
}

/// Class table with one extra learned row for the null (unconditional) label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedder<T> {
    pub num_classes: usize,
    pub table: Array2<T>,
}

impl<T: Scalar> LabelEmbedder<T> {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, hidden: usize, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, 0.02).expect("positive std");
        Self {
            num_classes,
            table: Array2::from_shape_fn((num_classes + 1, hidden), |_| T::of(dist.sample(rng))),
        }
    }

    pub fn zeros(num_classes: usize, hidden: usize) -> Self {
        Self {
            num_classes,
            table: Array2::zeros((num_classes + 1, hidden)),
        }
    }

    pub fn null_index(&self) -> usize {
        self.num_classes
    }

    /// Table row for `label`; `None` selects the null row.
    pub fn row_index(&self, label: Option<u32>) -> Result<usize> {
        match label {
            None => Ok(self.null_index()),
            Some(l) if (l as usize) < self.num_classes => Ok(l as usize),
            Some(l) => Err(NitError::LabelOutOfRange {
                label: l,
                num_classes: self.num_classes,
            }),
        }
    }

    /// Embedding of one label, replaced by the null row with probability
    /// `drop_prob`.
    pub fn embed<R: Rng + ?Sized>(&self, label: Option<u32>, drop_prob: f64, rng: &mut R) -> Result<Array1<T>> {
        let idx = self.row_index(label)?;
        let idx = if drop_prob > 0.0 && rng.random::<f64>() < drop_prob {
            self.null_index()
        } else {
            idx
        };
        Ok(self.table.row(idx).to_owned())
    }

    pub fn embed_all(&self, labels: &[Option<u32>]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((labels.len(), self.table.ncols()));
        for (mut row, &l) in out.outer_iter_mut().zip(labels) {
            row.assign(&self.table.row(self.row_index(l)?));
        }
        Ok(out)
    }
}

/// Replaces each label by `None` with probability `drop_prob`.
pub fn apply_label_drop<R: Rng + ?Sized>(labels: &[Option<u32>], drop_prob: f64, rng: &mut R) -> Vec<Option<u32>> {
    labels
        .iter()
        .map(|&l| if drop_prob > 0.0 && rng.random::<f64>() < drop_prob { None } else { l })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_embed_examples() {
        let proj = Linear::<f64>::zeros(4, 4);
        let zeros = Array2::<f64>::zeros((3, 4));
        assert_eq!(patch_embed(zeros.view(), &proj).unwrap(), zeros);
        let mut id = Linear::<f64>::zeros(4, 4);
        id.weight = Array2::eye(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>());
        assert_eq!(patch_embed(x.view(), &id).unwrap(), x);
        assert!(patch_embed(Array2::<f64>::zeros((2, 3)).view(), &id).is_err());

        let lin = Linear::<f32>::xavier(6, 8, &mut rng);
        let x = Array2::from_shape_fn((7, 6), |_| rng.random::<f32>());
        let y = patch_embed(x.view(), &lin).unwrap();
        for i in 0..7 {
            for j in 0..8 {
                let mut want = lin.bias[j] as f64;
                for c in 0..6 {
                    want += x[[i, c]] as f64 * lin.weight[[c, j]] as f64;
                }
                assert!((y[[i, j]] as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn timestep_embedding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = TimestepEmbedder::<f64>::new(32, 16, &mut rng);
        let e = emb.embed(&[0.3, 0.3, 0.0, 1.0, 0.3 + 1e-6]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        let cont = (&e.row(0) - &e.row(4)).mapv(f64::abs).sum();
        assert!(cont < 1e-5, "continuity {cont}");
        let n0 = e.row(2).dot(&e.row(2)).sqrt();
        let n1 = e.row(3).dot(&e.row(3)).sqrt();
        assert!((n0 - n1).abs() > 0.0);
        assert!(emb.embed(&[f64::NAN]).is_err());
        let f = timestep_frequencies(0.0, 8);
        assert_eq!(f, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn label_drop_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = LabelEmbedder::<f32>::new(5, 8, &mut rng);
        for _ in 0..100 {
            assert_eq!(emb.embed(Some(3), 0.0, &mut rng).unwrap(), emb.table.row(3));
            assert_eq!(emb.embed(Some(3), 1.0, &mut rng).unwrap(), emb.table.row(5));
        }
        assert!(matches!(
            emb.embed(Some(5), 0.0, &mut rng),
            Err(NitError::LabelOutOfRange { label: 5, num_classes: 5 })
        ));
        let draws = 100_000;
        let dropped = (0..draws)
            .filter(|_| emb.embed(Some(1), 0.1, &mut rng).unwrap() == emb.table.row(5))
            .count();
        assert!((dropped as f64 / draws as f64 - 0.1).abs() <= 0.01);
        let labels = apply_label_drop(&[Some(0); 1000], 1.0, &mut rng);
        assert!(labels.iter().all(Option::is_none));
    }
}
