//! FFT utilities: power spectra, dominant-frequency location, spectral
//! flatness. Used by the spectral teacher and as test oracles for the
//! synthesizer.

use rustfft::{num_complex::Complex64, FftPlanner};

/// Power spectrum of a real signal (first n/2+1 bins).
pub fn power_spectrum(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let mut buf: Vec<Complex64> = samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr() / n as f64).collect()
}

/// Frequency (Hz) of the strongest spectral peak, refined by parabolic
/// interpolation around the peak bin.
pub fn dominant_frequency(samples: &[f64], sample_rate_hz: u32) -> f64 {
    dominant_frequency_in_band(samples, sample_rate_hz, 0.0, sample_rate_hz as f64 / 2.0)
}

/// Frequency of the strongest spectral peak inside [lo_hz, hi_hz].
pub fn dominant_frequency_in_band(
    samples: &[f64],
    sample_rate_hz: u32,
    lo_hz: f64,
    hi_hz: f64,
) -> f64 {
    let spec = power_spectrum(samples);
    let n = samples.len() as f64;
    let bin_of = |hz: f64| (hz * n / sample_rate_hz as f64) as usize;
    let (lo, hi) = (bin_of(lo_hz).max(1), bin_of(hi_hz).min(spec.len() - 1));
    let mut best = lo;
    for (i, &p) in spec.iter().enumerate().take(hi + 1).skip(lo) {
        if p > spec[best] {
            best = i;
        }
    }
    let mut bin = best as f64;
    if best > 0 && best + 1 < spec.len() {
        let (a, b, c) = (spec[best - 1].ln(), spec[best].ln(), spec[best + 1].ln());
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            bin += 0.5 * (a - c) / denom;
        }
    }
    bin * sample_rate_hz as f64 / n
}

/// Spectral flatness: geometric mean / arithmetic mean of the power
/// spectrum, in (0, 1]. White-ish signals score near 1.
pub fn spectral_flatness(samples: &[f64]) -> f64 {
    let spec = power_spectrum(samples);
    let body = &spec[1..spec.len() - 1];
    let eps = 1e-30;
    let log_mean = body.iter().map(|&p| (p + eps).ln()).sum::<f64>() / body.len() as f64;
    let mean = body.iter().sum::<f64>() / body.len() as f64;
    log_mean.exp() / (mean + eps)
}
