//! Core library for a chained-cascade region classifier: a small reverse-mode
//! autodiff engine, RoI feature extraction with per-stage context geometry,
//! feature/score chaining across cascade stages, the rejection-masked
//! training objective, and the synthetic-benchmark training/eval pipeline.

pub mod chain;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod gradcheck;
pub mod params;
pub mod roi;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
