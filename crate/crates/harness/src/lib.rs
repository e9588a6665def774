//! Synthetic data, training loop, evaluation and self-checks around `nit-core`.

pub mod data;
pub mod synth;
pub mod train;
pub mod eval;
pub mod config;
pub mod image_io;
pub mod plot;
pub mod verify;
