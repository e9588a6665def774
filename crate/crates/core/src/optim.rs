//! Adam over the named tensor registry of a model.

use ndarray::ArrayD;

use crate::blocks::NitParams;
use crate::error::{NitError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

/// L2 norm over every gradient tensor.
pub fn global_grad_norm<T: Scalar>(grads: &NitParams<T>) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &NitParams<T>) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(NitError::Config(format!("bad Adam settings {config:?}")));
        }
        let zeros: Vec<ArrayD<T>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut NitParams<T>, grads: &NitParams<T>) -> Result<f64> {
        let norm = global_grad_norm(grads);
        if !norm.is_finite() {
            return Err(NitError::NonFinite("gradient norm".into()));
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps, wd, clip_t) = (c.lr, c.eps, c.weight_decay, T::of(clip));
        let grad_tensors = grads.tensors();
        let mut param_tensors = params.tensors_mut();
        if grad_tensors.len() != param_tensors.len() {
            return Err(NitError::Shape("gradient registry does not match parameters".into()));
        }
        for (i, ((_, p), (_, g))) in param_tensors.iter_mut().zip(grad_tensors.iter()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(p.view_mut())
                .and(g)
                .and(m.view_mut())
                .and(v.view_mut())
                .for_each(|p, &g, m, v| {
                    let g = g * clip_t;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = m.as_f64() / bc1;
                    let vh = v.as_f64() / bc2;
                    let mut upd = mh / (vh.sqrt() + eps);
                    if wd != 0.0 {
                        upd += wd * p.as_f64();
                    }
                    *p = T::of(p.as_f64() - lr * upd);
                });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::NitConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = NitParams::<f64>::new(NitConfig::gradcheck(4, 1, 2), &mut rng).unwrap();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.randomize(1.0, &mut rng);
        let mut opt = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, &params).unwrap();
        opt.step(&mut params, &grads).unwrap();
        for (((_, a), (_, b)), (_, g)) in params.tensors().iter().zip(before.tensors().iter()).zip(grads.tensors().iter()) {
            for ((x, y), gv) in a.iter().zip(b.iter()).zip(g.iter()) {
                // bias-corrected first step is lr·g/(|g| + eps)
                let want = 0.01 * gv / (gv.abs() + 1e-8);
                assert!(((y - x) - want).abs() < 1e-12, "{x} {y} {gv}");
            }
        }
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn clipping_and_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = NitParams::<f32>::new(NitConfig::gradcheck(4, 1, 2), &mut rng).unwrap();
        let mut grads = params.zeros_like();
        grads.randomize(1.0, &mut rng);
        let cfg = AdamConfig { max_grad_norm: Some(1.0), ..Default::default() };
        let mut opt = Adam::new(cfg, &params).unwrap();
        let norm = opt.step(&mut params, &grads).unwrap();
        assert!(norm > 1.0);
        grads.patch_embed.weight[[0, 0]] = f32::NAN;
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
