//! Encoder geometry and hyperparameters.

use crate::error::{DeluluError, Result};
use serde::{Deserialize, Serialize};

/// Student encoder configuration. Defaults are desk-scale (64 channels,
/// 2 transformer layers); paper-scale values (512 channels, deeper stacks)
/// remain valid settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    pub conv_channels: usize,
    pub conv_strides: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub n_transformer_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    /// Cluster vocabulary size k.
    pub n_codes: usize,
    pub logit_temperature: f64,
    /// Fixed sinusoidal positional encoding; disable for equivariance tests.
    pub use_positional: bool,
    pub sample_rate_hz: u32,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            conv_channels: 64,
            conv_strides: vec![4, 2, 2, 2, 2, 2, 2],
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            n_transformer_layers: 2,
            model_dim: 96,
            n_heads: 4,
            ffn_dim: 192,
            proj_dim: 64,
            n_codes: 256,
            logit_temperature: 0.1,
            use_positional: true,
            sample_rate_hz: crate::audio::DEFAULT_SAMPLE_RATE,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_strides.len() != self.conv_kernels.len() {
            return Err(DeluluError::Contract(format!(
                "conv geometry: {} strides vs {} kernels",
                self.conv_strides.len(),
                self.conv_kernels.len()
            )));
        }
        if self.conv_strides.is_empty() {
            return Err(DeluluError::Contract("conv stack must be non-empty".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(DeluluError::Contract(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_codes < 2 {
            return Err(DeluluError::Contract("n_codes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Frame period implied by the stride product (16 ms at defaults).
    pub fn frame_period_ms(&self) -> f64 {
        1000.0 * self.stride_product() as f64 / self.sample_rate_hz as f64
    }

    /// Minimum input length producing at least one output frame.
    pub fn receptive_field_min(&self) -> usize {
        let mut need = 1usize;
        for (stride, kernel) in
            self.conv_strides.iter().zip(&self.conv_kernels).rev()
        {
            need = (need - 1) * stride + kernel;
        }
        need
    }

    /// Chained per-layer L_out = floor((L_in - kernel)/stride) + 1.
    pub fn output_length(&self, n_samples: usize) -> Result<usize> {
        let min = self.receptive_field_min();
        if n_samples < min {
            return Err(DeluluError::Contract(format!(
                "input of {n_samples} samples shorter than receptive-field minimum {min}"
            )));
        }
        let mut l = n_samples;
        for (stride, kernel) in self.conv_strides.iter().zip(&self.conv_kernels) {
            l = (l - kernel) / stride + 1;
        }
        Ok(l)
    }
}
