//! quantsweep-core: forward-pass-only sensitivity analysis and
//! mixed-precision planning for toy SSM / hybrid SSM–attention language
//! models.
//!
//! The crate answers one question cheaply: *which layers of a model can be
//! quantized aggressively, and which must be kept in high precision?* It does
//! so without gradients or retraining — quantize one layer at a time, run the
//! forward pass, and compare the student's output distribution against the
//! full-precision teacher's. Everything downstream (rankings, rank-agreement
//! statistics, mixed-precision plans) is derived from those per-layer forward
//! passes.
//!
//! Module map:
//!
//! * [`numerics`] — tensor container and deterministic dense kernels,
//!   generic over [`numerics::Scalar`] (`f32`/`f64`);
//! * [`rng`] — pinned SplitMix64 stream, the reproducibility anchor;
//! * [`corpus`] — byte-level and synthetic token streams;
//! * [`model`] — deterministic model zoo, forward pass, binary format;
//! * [`quant`] — symmetric per-channel fake quantization;
//! * [`metrics`] — cross-entropy, perplexity, KL, SQNR and their identities;
//! * [`eval`] — chunked model evaluation;
//! * [`sensitivity`] — per-layer sweeps, rankings, Kendall rank agreement;
//! * [`planner`] — threshold and merged-list mixed-precision plans;
//! * [`selftest`] — executable checks of the mathematical identities.
//!
//! The reference pipeline runs in `f64`; [`Tensor`] is the concrete alias the
//! higher-level modules use.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod planner;
pub mod quant;
pub mod rng;
pub mod selftest;
pub mod sensitivity;

pub use error::{Error, Result};

/// Concrete tensor type of the reference pipeline (64-bit elements).
pub type Tensor = numerics::Tensor<f64>;
