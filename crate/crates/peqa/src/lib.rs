//! Desk-scale toolkit for scale-only adaptation of low-bit quantized
//! networks.
//!
//! Weight matrices are quantized into frozen unsigned integer codes plus
//! trainable per-channel or per-group scales; downstream fine-tuning updates
//! only the scales. The crate provides:
//!
//! - [`quant`]: asymmetric round-to-nearest quantization with minimum-MSE
//!   scale/zero-point initialization and group partitioning;
//! - [`pack`]: bit-exact packing of b-bit codes into 32-bit words and the
//!   storage-size arithmetic;
//! - [`kernel`]: fused dequantize–matvec/matmul over packed codes, plus a
//!   bandwidth benchmark;
//! - [`model`]: two small fixed architectures (MLP, tiny decoder-only
//!   transformer) with hand-written forward/backward passes for scale-only,
//!   straight-through quantization-aware, and dense training;
//! - [`trainer`]: AdamW training loops for the four modes (scale-only, QAT,
//!   round-to-nearest baseline, full fine-tuning);
//! - [`adapters`]: binary base/adapter/dense-checkpoint formats and task
//!   switching that replaces only scale bytes;
//! - [`accounting`]: closed-form learnable-parameter and model-size estimates
//!   for shipped LLaMA-family layer catalogs;
//! - [`data`]: byte-level corpora, synthetic task generators, and regression
//!   CSV ingestion.

pub mod accounting;
pub mod adapters;
pub mod data;
pub mod error;
pub mod kernel;
pub mod model;
pub mod pack;
pub mod quant;
pub mod trainer;

pub use error::{Error, Result};
