//! SNR-controlled noise mixing and colored-noise generation.

use crate::audio::Waveform;
use crate::error::{DeluluError, Result};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Overlapping synthetic speech (cross-talk).
    Babble,
    /// 1/f colored noise (environmental stand-in).
    Colored,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Uniform SNR draw range in dB, default [15, 25].
    pub snr_range_db: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { kind: NoiseKind::Babble, snr_range_db: (15.0, 25.0), seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(DeluluError::Contract(format!(
                "snr_range lower {} > upper {}",
                self.snr_range_db.0, self.snr_range_db.1
            )));
        }
        Ok(())
    }
}

/// Uniform SNR draw from the spec's range.
pub fn sample_snr_db(range: (f64, f64), rng: &mut impl Rng) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Mix noise into clean speech at an exact SNR. The noise is tiled or
/// cropped to the clean length, scaled by rms(clean)/(rms(noise)·10^(snr/20)),
/// and added. The result is clipped to [-1, 1] with a warning if needed.
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.sample_rate_hz != noise.sample_rate_hz {
        return Err(DeluluError::Contract(format!(
            "mix_noise: sample rates differ ({} vs {})",
            clean.sample_rate_hz, noise.sample_rate_hz
        )));
    }
    let clean_rms = clean.rms();
    if clean_rms < 1e-8 {
        return Err(DeluluError::Numeric("cannot define SNR against silence".into()));
    }
    let tiled: Vec<f64> =
        (0..clean.len()).map(|i| noise.samples[i % noise.samples.len()]).collect();
    let noise_rms = (tiled.iter().map(|v| v * v).sum::<f64>() / tiled.len() as f64).sqrt();
    if noise_rms < 1e-12 {
        return Err(DeluluError::Numeric("mix_noise: silent noise".into()));
    }
    let scale = clean_rms / (noise_rms * 10f64.powf(snr_db / 20.0));
    let samples = clean
        .samples
        .iter()
        .zip(&tiled)
        .map(|(c, n)| c + n * scale)
        .collect();
    let mut out = Waveform::new(samples, clean.sample_rate_hz)?;
    out.clip();
    Ok(out)
}

/// 1/f colored noise: white Gaussian noise spectrally shaped so bin power
/// falls off as 1/f, RMS-normalized to 0.1. Fixed shaping, seeded.
pub fn make_colored_noise(duration_s: f64, sample_rate_hz: u32, seed: u64) -> Result<Waveform> {
    let n = (duration_s * sample_rate_hz as f64).round() as usize;
    let mut r = rng::stream(seed, 0xC0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut buf: Vec<Complex64> =
        (0..n).map(|_| Complex64::new(normal.sample(&mut r), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = (k.min(n - k)).max(1) as f64; // symmetric, DC treated as bin 1
        *v *= 1.0 / f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut samples: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let s = 0.1 / rms;
    for v in samples.iter_mut() {
        *v *= s;
    }
    Waveform::new(samples, sample_rate_hz)
}

/// Achieved SNR in dB between a clean reference and the noise component of a
/// mixture (test helper).
pub fn achieved_snr_db(clean: &Waveform, mixture: &Waveform) -> f64 {
    let noise: Vec<f64> =
        mixture.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect();
    let nrms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
    20.0 * (clean.rms() / nrms).log10()
}
