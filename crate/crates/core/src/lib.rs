//! Native-resolution diffusion transformer primitives.
//!
//! Images of any size are tokenized at their own resolution, packed into
//! fixed-length sequences, positioned with axial 2D RoPE and attended with a
//! block-diagonal varlen kernel. The model is trained with flow matching.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file name the common instantiations.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod packing;
pub mod rope;
pub mod scalar;
pub mod tokenizer;

pub use error::{NitError, Result};
pub use scalar::Scalar;

pub type NitParams32 = blocks::NitParams<f32>;
pub type NitParams64 = blocks::NitParams<f64>;
pub type PackedBatch32 = packing::PackedBatch<f32>;
pub type PackedBatch64 = packing::PackedBatch<f64>;
pub type LatentImage32 = tokenizer::LatentImage<f32>;
pub type LatentImage64 = tokenizer::LatentImage<f64>;
pub type TokenMatrix32 = tokenizer::TokenMatrix<f32>;
pub type TokenMatrix64 = tokenizer::TokenMatrix<f64>;
pub type Adam32 = optim::Adam<f32>;
pub type Adam64 = optim::Adam<f64>;
