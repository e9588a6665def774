//! Dense building blocks with explicit reverse-mode passes.
//!
//! Weights are stored input-major (`in × out`) so a layer is `x · W + b` on
//! row-major token matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

/// Affine layer `y = x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| T::of(dist.sample(rng))),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| T::of(dist.sample(rng))),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    /// Like [`Linear::backward`] but skips the input gradient.
    pub fn backward_params(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise layer normalization without a learned affine.
///
/// Returns the normalized rows and the per-row inverse standard deviation,
/// which is all the backward pass needs.
pub fn layer_norm<T: Scalar>(x: ArrayView2<T>, eps: f64) -> (Array2<T>, Array1<T>) {
    let cols = x.ncols();
    let mut y = Array2::zeros(x.raw_dim());
    let mut inv = Array1::zeros(x.nrows());
    for ((row, mut out), inv_std) in x.outer_iter().zip(y.outer_iter_mut()).zip(inv.iter_mut()) {
        let (mean, var) = moments(row.iter().copied(), cols);
        let r = 1.0 / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = T::of((v.as_f64() - mean) * r);
        }
        *inv_std = T::of(r);
    }
    (y, inv)
}

/// Mean and biased variance accumulated in `f64`.
pub(crate) fn moments<T: Scalar>(values: impl Iterator<Item = T> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = values.clone().map(|v| v.as_f64()).sum::<f64>() / nf;
    let var = values
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / nf;
    (mean, var)
}

/// Backward of [`layer_norm`] given its outputs `y` and inverse stds.
pub fn layer_norm_backward<T: Scalar>(y: ArrayView2<T>, inv_std: &Array1<T>, dy: ArrayView2<T>) -> Array2<T> {
    let n = T::of(y.ncols() as f64);
    let mut dx = Array2::zeros(y.raw_dim());
    for (((yr, dyr), mut dxr), &r) in y
        .outer_iter()
        .zip(dy.outer_iter())
        .zip(dx.outer_iter_mut())
        .zip(inv_std.iter())
    {
        let mean_dy = dyr.sum() / n;
        let mean_dyy = yr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
        Zip::from(&mut dxr)
            .and(&yr)
            .and(&dyr)
            .for_each(|o, &yv, &g| *o = r * (g - mean_dy - yv * mean_dyy));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_tanh<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let g = gelu_tanh_grad(x);
            assert!((g - central(gelu_tanh, x)).abs() < 1e-8, "gelu at {x}");
            let s = silu_grad(x);
            assert!((s - central(silu, x)).abs() < 1e-8, "silu at {x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]];
        let (y, _) = layer_norm(x.view(), LN_EPS);
        let (m, v) = moments(y.row(0).iter().copied(), 4);
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-5);
        assert!(y.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3f64, -1.2, 2.0, 0.7, -0.1]];
        let w = array![[0.5f64, -0.3, 1.1, 0.2, 0.9]];
        let loss = |x: &Array2<f64>| (layer_norm(x.view(), LN_EPS).0 * &w).sum();
        let (y, inv) = layer_norm(x.view(), LN_EPS);
        let dx = layer_norm_backward(y.view(), &inv, w.view());
        for j in 0..5 {
            let mut xp = x.clone();
            xp[[0, j]] += 1e-6;
            let mut xm = x.clone();
            xm[[0, j]] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[[0, j]]).abs() < 1e-7);
        }
    }
}
