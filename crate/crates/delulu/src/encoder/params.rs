//! Named parameter store for the student encoder.

use crate::encoder::EncoderConfig;
use crate::error::{DeluluError, Result};
use crate::numerics::Tensor;
use crate::rng;
use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

/// Ordered name -> tensor map. Iteration order is fixed at construction so
/// optimizer state and checkpoints line up across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    tensors: IndexMap<String, Tensor>,
}

fn gaussian(shape: Vec<usize>, std: f64, seed: u64, name: &str) -> Tensor {
    let mut r = rng::stream_str(seed, name);
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(&mut r)).collect()).unwrap()
}

impl EncoderParams {
    /// Deterministic initialization. Per-parameter seeds derive from
    /// (seed, name), so the values do not depend on declaration order.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut t = IndexMap::new();
        let mut put = |name: String, tensor: Tensor| {
            t.insert(name, tensor);
        };

        let mut c_in = 1usize;
        for (i, (&k, &_s)) in cfg.conv_kernels.iter().zip(&cfg.conv_strides).enumerate() {
            let c_out = cfg.conv_channels;
            let std = (1.0 / (c_in * k) as f64).sqrt();
            put(format!("conv{i}.weight"), gaussian(vec![c_out, c_in, k], std, seed, &format!("conv{i}.weight")));
            put(format!("conv{i}.bias"), Tensor::zeros(vec![c_out]));
            put(format!("conv{i}.ln_gain"), Tensor::full(vec![c_out], 1.0));
            put(format!("conv{i}.ln_bias"), Tensor::zeros(vec![c_out]));
            c_in = c_out;
        }

        let d = cfg.model_dim;
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        put("in_proj.weight".into(), gaussian(vec![cfg.conv_channels, d], xavier(cfg.conv_channels, d), seed, "in_proj.weight"));
        put("in_proj.bias".into(), Tensor::zeros(vec![d]));
        put("mask_embed".into(), gaussian(vec![d], 0.1, seed, "mask_embed"));

        for l in 0..cfg.n_transformer_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("layer{l}.attn.{w}");
                put(name.clone(), gaussian(vec![d, d], xavier(d, d), seed, &name));
                put(format!("layer{l}.attn.{w}_bias"), Tensor::zeros(vec![d]));
            }
            put(format!("layer{l}.ln1_gain"), Tensor::full(vec![d], 1.0));
            put(format!("layer{l}.ln1_bias"), Tensor::zeros(vec![d]));
            put(format!("layer{l}.ln2_gain"), Tensor::full(vec![d], 1.0));
            put(format!("layer{l}.ln2_bias"), Tensor::zeros(vec![d]));
            let name = format!("layer{l}.ffn.w1");
            put(name.clone(), gaussian(vec![d, cfg.ffn_dim], xavier(d, cfg.ffn_dim), seed, &name));
            put(format!("layer{l}.ffn.b1"), Tensor::zeros(vec![cfg.ffn_dim]));
            let name = format!("layer{l}.ffn.w2");
            put(name.clone(), gaussian(vec![cfg.ffn_dim, d], xavier(cfg.ffn_dim, d), seed, &name));
            put(format!("layer{l}.ffn.b2"), Tensor::zeros(vec![d]));
        }

        put("final_ln_gain".into(), Tensor::full(vec![d], 1.0));
        put("final_ln_bias".into(), Tensor::zeros(vec![d]));
        put("proj.weight".into(), gaussian(vec![d, cfg.proj_dim], xavier(d, cfg.proj_dim), seed, "proj.weight"));
        put("proj.bias".into(), Tensor::zeros(vec![cfg.proj_dim]));
        put("codes".into(), gaussian(vec![cfg.n_codes, cfg.proj_dim], 1.0, seed, "codes"));

        Ok(EncoderParams { tensors: t })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.values().map(|t| t.numel()).collect()
    }

    pub fn from_tensors(tensors: IndexMap<String, Tensor>) -> Self {
        EncoderParams { tensors }
    }

    /// Validate that shapes match the given config's freshly derived shapes.
    pub fn validate_against(&self, cfg: &EncoderConfig) -> Result<()> {
        let reference = EncoderParams::init(cfg, 0)?;
        if reference.len() != self.len() {
            return Err(DeluluError::Data(format!(
                "checkpoint has {} parameters, config implies {}",
                self.len(),
                reference.len()
            )));
        }
        for ((name_a, a), (name_b, b)) in self.iter().zip(reference.iter()) {
            if name_a != name_b || a.shape() != b.shape() {
                return Err(DeluluError::Data(format!(
                    "checkpoint parameter {name_a} {:?} does not match config's {name_b} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::init(&cfg, 42).unwrap();
        let b = EncoderParams::init(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = EncoderParams::init(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn validate_catches_config_mismatch() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, 1).unwrap();
        let other = EncoderConfig { model_dim: 64, n_heads: 4, ..EncoderConfig::default() };
        assert!(p.validate_against(&cfg).is_ok());
        assert!(p.validate_against(&other).is_err());
    }
}
