//! Self-contained conditional diffusion system: noise schedule, 2-D
//! mixture dataset, residual-MLP denoiser with handwritten reverse-mode
//! gradients and cached time features, and a deterministic DDIM sampler
//! with classifier-free guidance.

mod checkpoint;
mod data;
mod model;
mod sampler;
mod schedule;

pub use checkpoint::{read_tensors, tensors_to_bytes, write_tensors, BFT_MAGIC, BFT_VERSION};
pub use data::ToyDataset;
pub use model::{
    cache_time_features, DenoiserGrads, DenoiserParams, ForwardTrace, ModelDims, Tensor,
    TimeFeatureTable, IN_DIM,
};
pub use sampler::{cfg_combine, ddim_sample, ddim_sample_from, ddim_steps, ddim_update, SampleSpec};
pub use schedule::{forward_diffuse, make_schedule, time_embedding, NoiseSchedule};

/// A data point: one 2-D observation.
pub type Point = [f64; 2];
