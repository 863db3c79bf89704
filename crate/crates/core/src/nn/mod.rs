//! Small numerical core: dense tensors, a reverse-mode tape, layers,
//! AdamW and a text checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod se3;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{upsample_repeat, Conv1d, LayerNorm, Linear, Mlp, ResBlock1d, TransformerBlock};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{AttnLayout, Grads, Tape, Unary, Var, ZERO_INDEX};
pub use tensor::Tensor;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("embedding dimension {0} is odd")]
    OddDimension(usize),
    #[error("head dimension {0} is odd")]
    OddHeadDim(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("computation graph contains a cycle")]
    GraphCycle,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

/// `[sin(ω_k τ)…, cos(ω_k τ)…]` with `ω_k` geometric from 1 to 10⁴.
pub fn sinusoidal_embed<T: Real>(tau: T, d_emb: usize) -> Result<Vec<T>, NnError> {
    if !d_emb.is_multiple_of(2) || d_emb == 0 {
        return Err(NnError::OddDimension(d_emb));
    }
    let half = d_emb / 2;
    let tau = tau.to_f64_lossy();
    let mut out = vec![T::zero(); d_emb];
    for k in 0..half {
        let w = if half == 1 { 1.0 } else { 1e4f64.powf(k as f64 / (half - 1) as f64) };
        let (s, c) = (w * tau).sin_cos();
        out[k] = T::lit(s);
        out[half + k] = T::lit(c);
    }
    Ok(out)
}
