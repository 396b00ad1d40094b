//! Attention-alignment fine-tuning for a toy vision-language decoder.
//!
//! The crate contains a small reverse-mode autodiff engine, a decoder
//! transformer over `[visual | prompt | answer]` sequences, low-rank adapters
//! with prompt-level and token-level expert mixtures on the query/key
//! projections, a mask-energy loss that steers the visual attention of the
//! most visually-focused heads onto weak-label regions, and a synthetic
//! planted-region task to measure the effect.

pub mod adapters;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;
pub mod weaklabels;

pub use error::{Error, Result};
