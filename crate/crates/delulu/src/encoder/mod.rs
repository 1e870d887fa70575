//! Student encoder: strided conv feature extractor plus a small transformer,
//! with a cosine code-logits head and a binary checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::EncoderConfig;
pub use model::{
    code_logits, conv_stack, conv_stack_forward, register_params, sinusoidal_pe, student_forward,
    transformer_forward, transformer_layers, ParamNodes, StudentOutput,
};
pub use params::EncoderParams;

use crate::error::{DeluluError, Result};
use crate::numerics::Tensor;

/// A (T, dim) matrix of frame vectors with its frame period in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub values: Tensor,
    pub frame_period_ms: f64,
}

impl FrameSequence {
    pub fn new(values: Tensor, frame_period_ms: f64) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(DeluluError::Contract(format!(
                "frame sequence must be 2-d, got shape {:?}",
                values.shape()
            )));
        }
        if !(frame_period_ms > 0.0) {
            return Err(DeluluError::Contract(format!(
                "frame period must be positive, got {frame_period_ms}"
            )));
        }
        Ok(FrameSequence { values, frame_period_ms })
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.values.data()[t * d..(t + 1) * d]
    }
}
