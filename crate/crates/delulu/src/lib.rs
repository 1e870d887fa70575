//! DELULU: speaker-aware self-supervised speech pretraining at desk scale.
//!
//! A student encoder (conv stack + transformer) is trained with a dual
//! masked-prediction + denoising objective against pseudo-labels obtained
//! by mini-batch k-means over frame-level teacher embeddings, then
//! evaluated with a speaker-centric suite (EER verification, zero-shot
//! KNN profiling, demographic stratification, AM-Softmax downstream head).

pub mod audio;
pub mod cluster;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod teacher;
pub mod train;

pub use error::{DeluluError, Result};
