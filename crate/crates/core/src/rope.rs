//! Axial 2D rotary position embedding.
//!
//! A head vector of length `d` is split into `d/2` consecutive pairs. The
//! first `d/4` pairs rotate by `h'·ω_j`, the last `d/4` by `w'·ω_j`, where
//! `(h', w')` is the token's 0-based position inside its own instance grid.

use ndarray::{Array2, ArrayViewMut2};

use crate::error::{NitError, Result};
use crate::packing::PackedLayout;
use crate::scalar::Scalar;

pub const DEFAULT_THETA: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, theta: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(NitError::Config(format!(
                "RoPE head dim must be a positive multiple of 4, got {head_dim}"
            )));
        }
        if !(theta.is_finite() && theta > 0.0) {
            return Err(NitError::Config(format!("RoPE theta must be positive, got {theta}")));
        }
        Ok(Self { head_dim, theta })
    }

    /// Number of rotated pairs, `d_s = d / 2`.
    pub fn spatial_dim(&self) -> usize {
        self.head_dim / 2
    }
}

/// `ω_j = θ^(−2j/d_s)` for `j < d_s/2`.
pub fn base_frequencies(cfg: &RopeConfig) -> Vec<f64> {
    let ds = cfg.spatial_dim() as f64;
    (0..cfg.spatial_dim() / 2)
        .map(|j| cfg.theta.powf(-2.0 * j as f64 / ds))
        .collect()
}

/// Angle vectors `Concat(h'·ω, w'·ω)` for every token of a `gh × gw` grid in
/// raster order.
pub fn angle_grid(gh: usize, gw: usize, omega: &[f64]) -> Array2<f64> {
    angle_grid_from(gh, gw, (0.0, 0.0), omega)
}

/// [`angle_grid`] with coordinates shifted by `origin`.
pub fn angle_grid_from(gh: usize, gw: usize, origin: (f64, f64), omega: &[f64]) -> Array2<f64> {
    let half = omega.len();
    let mut phi = Array2::zeros((gh * gw, 2 * half));
    for i in 0..gh {
        for j in 0..gw {
            let mut row = phi.row_mut(i * gw + j);
            let (h, w) = (origin.0 + i as f64, origin.1 + j as f64);
            for (l, &om) in omega.iter().enumerate() {
                row[l] = h * om;
                row[half + l] = w * om;
            }
        }
    }
    phi
}

/// Rotates consecutive pairs `(v_{2l}, v_{2l+1})` by `angles[l]`.
pub fn apply_rotation<T: Scalar>(v: &[T], angles: &[f64]) -> Result<Vec<T>> {
    if v.len() != 2 * angles.len() {
        return Err(NitError::Shape(format!(
            "vector of length {} needs {} angles, got {}",
            v.len(),
            v.len() / 2,
            angles.len()
        )));
    }
    let mut out = v.to_vec();
    for (pair, &a) in out.chunks_exact_mut(2).zip(angles) {
        let (s, c) = a.sin_cos();
        let (x0, x1) = (pair[0].as_f64(), pair[1].as_f64());
        pair[0] = T::of(c * x0 - s * x1);
        pair[1] = T::of(s * x0 + c * x1);
    }
    Ok(out)
}

/// Per-token cos/sin of every rotated pair, duplicated to head width so that
/// `v' = v ⊙ cos + rotate_half(v) ⊙ sin`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable<T> {
    pub cos: Array2<T>,
    pub sin: Array2<T>,
}

impl<T: Scalar> RopeTable<T> {
    /// Builds the table from `rows × d_s` angles (computed in `f64`).
    pub fn from_angles(angles: &Array2<f64>) -> Self {
        let (rows, ds) = angles.dim();
        let mut cos = Array2::zeros((rows, 2 * ds));
        let mut sin = Array2::zeros((rows, 2 * ds));
        for ((phi, mut c), mut s) in angles.outer_iter().zip(cos.outer_iter_mut()).zip(sin.outer_iter_mut()) {
            for (l, &a) in phi.iter().enumerate() {
                let (sv, cv) = a.sin_cos();
                c[2 * l] = T::of(cv);
                c[2 * l + 1] = T::of(cv);
                s[2 * l] = T::of(sv);
                s[2 * l + 1] = T::of(sv);
            }
        }
        Self { cos, sin }
    }

    pub fn rows(&self) -> usize {
        self.cos.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.cos.ncols()
    }

    /// Rotates every head of `x` (`rows × heads·d`) in place.
    pub fn rotate(&self, x: ArrayViewMut2<T>) {
        self.apply(x, false);
    }

    /// Applies the transposed rotation; this is the backward of [`Self::rotate`].
    pub fn rotate_inverse(&self, x: ArrayViewMut2<T>) {
        self.apply(x, true);
    }

    fn apply(&self, mut x: ArrayViewMut2<T>, inverse: bool) {
        let d = self.head_dim();
        assert_eq!(x.nrows(), self.rows(), "rope table rows");
        assert_eq!(x.ncols() % d, 0, "model dim must be a multiple of the head dim");
        for ((mut row, c), s) in x.outer_iter_mut().zip(self.cos.outer_iter()).zip(self.sin.outer_iter()) {
            let row = row.as_slice_mut().expect("contiguous rows");
            for head in row.chunks_exact_mut(d) {
                for l in 0..d / 2 {
                    let (cv, mut sv) = (c[2 * l], s[2 * l]);
                    if inverse {
                        sv = -sv;
                    }
                    let (x0, x1) = (head[2 * l], head[2 * l + 1]);
                    head[2 * l] = x0 * cv - x1 * sv;
                    head[2 * l + 1] = x1 * cv + x0 * sv;
                }
            }
        }
    }
}

/// Table for a packed batch: each instance's grid starts again at `(0, 0)`.
pub fn rope_for_packed<T: Scalar>(layout: &PackedLayout, cfg: &RopeConfig) -> Result<RopeTable<T>> {
    let checked = PackedLayout::from_parts(layout.cu_seqlens().to_vec(), layout.grids().to_vec())?;
    let omega = base_frequencies(cfg);
    let mut angles = Array2::zeros((checked.total_tokens(), cfg.spatial_dim()));
    for (range, &(gh, gw)) in checked.segments().zip(checked.grids()) {
        angles
            .slice_mut(ndarray::s![range, ..])
            .assign(&angle_grid(gh, gw, &omega));
    }
    Ok(RopeTable::from_angles(&angles))
}
