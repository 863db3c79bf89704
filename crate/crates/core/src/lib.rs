//! Multi-agent motion generation with per-token noise levels: SE(3)
//! geometry, a synthetic interaction generator, a VQ-VAE motion tokenizer,
//! a diffusion-forcing transformer, sampling strategies and metrics.
//!
//! Numerical code is generic over [`scalar::Real`]; the aliases below fix
//! the scalar for the common cases.

pub mod body;
pub mod config;
pub mod dataset;
pub mod dfot;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod vqvae;

pub use scalar::Real;

pub type Transform32 = geometry::RigidTransform<f32>;
pub type Transform64 = geometry::RigidTransform<f64>;
pub type Rotation6D32 = geometry::Rotation6D<f32>;
pub type Rotation6D64 = geometry::Rotation6D<f64>;
/// Single-precision tokenizer, as trained by the pipeline.
pub type Vqvae32 = vqvae::Vqvae<f32>;
pub type Vqvae64 = vqvae::Vqvae<f64>;
/// Single-precision denoiser, as trained by the pipeline.
pub type Dfot32 = dfot::Dfot<f32>;
pub type Dfot64 = dfot::Dfot<f64>;
