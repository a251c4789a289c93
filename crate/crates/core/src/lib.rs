//! Low-bit weight quantization laboratory built around a toy conditional
//! diffusion model.
//!
//! The crate covers the full pipeline: deterministic metrics and RNG
//! ([`metrics`]), per-channel quantization with balance levels and
//! alternating scale optimization ([`quantizer`]), sub-byte packed model
//! storage and average-bit accounting ([`bitpack`]), the toy denoiser with
//! handwritten gradients, DDIM sampling and cached time features
//! ([`toydiff`]), two-stage distillation training ([`qat`]), per-layer
//! sensitivity scanning and mixed-precision planning ([`sensitivity`]),
//! and the operator-facing pipeline commands ([`pipeline`], [`config`]).

pub mod bitpack;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod qat;
pub mod quantizer;
pub mod sensitivity;
pub mod toydiff;
pub(crate) mod wire;

pub use error::{Error, Result};
