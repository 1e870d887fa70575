//! Waveform ingestion, synthetic corpus generation, and SNR-controlled
//! noise mixing.

pub mod manifest;
pub mod noise;
pub mod spectrum;
pub mod synth;
pub mod wav;

pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use noise::{make_colored_noise, mix_noise, sample_snr_db, NoiseKind, NoiseSpec};
pub use synth::{generate_speakers, make_babble, synth_utterance, SpeakerGenConfig, SyntheticSpeaker};
pub use wav::{read_wav, write_wav, SampleFormat};

use crate::error::{DeluluError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform: f64 samples in [-1, 1] at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(DeluluError::Contract("waveform must be non-empty".into()));
        }
        if sample_rate_hz == 0 {
            return Err(DeluluError::Contract("sample rate must be positive".into()));
        }
        Ok(Waveform { samples, sample_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Clamp samples into [-1, 1], warning when anything actually clips.
    pub fn clip(&mut self) {
        let mut clipped = 0usize;
        for s in self.samples.iter_mut() {
            if s.abs() > 1.0 {
                *s = s.clamp(-1.0, 1.0);
                clipped += 1;
            }
        }
        if clipped > 0 {
            log::warn!("waveform clipped at {clipped} samples");
        }
    }
}
