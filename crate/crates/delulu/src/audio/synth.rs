//! Synthetic multi-speaker utterance generator.
//!
//! Each speaker is a small parametric voice model: a base f0, a set of
//! formant resonances, and jitter/shimmer levels. Demographic tags are
//! controlled latent factors: the f0 band determines the gender label and
//! the jitter level determines the age band, so stratified evaluation has
//! real structure to find.

use crate::audio::Waveform;
use crate::error::{DeluluError, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub speaker_id: String,
    pub identity_seed: u64,
    pub base_f0_hz: f64,
    /// (center_hz, bandwidth_hz) per resonance.
    pub formants: Vec<(f64, f64)>,
    pub jitter: f64,
    pub shimmer: f64,
    pub gender: String,
    pub age_band: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerGenConfig {
    pub female_f0_range: (f64, f64),
    pub male_f0_range: (f64, f64),
    /// Jitter ranges per age band, youngest first.
    pub jitter_bands: Vec<(String, f64, f64)>,
    pub shimmer_range: (f64, f64),
    pub sample_rate_hz: u32,
}

impl Default for SpeakerGenConfig {
    fn default() -> Self {
        SpeakerGenConfig {
            female_f0_range: (165.0, 255.0),
            male_f0_range: (85.0, 155.0),
            jitter_bands: vec![
                ("18-35".into(), 0.002, 0.004),
                ("36-55".into(), 0.004, 0.008),
                ("56-75".into(), 0.008, 0.012),
            ],
            shimmer_range: (0.02, 0.08),
            sample_rate_hz: crate::audio::DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Deterministic bank of `n` speakers. Genders alternate; within a gender
/// the f0 band is partitioned into equal slots with a small in-slot offset,
/// so inter-speaker f0 gaps are bounded below by construction (needed for
/// the corpus-separability precondition of the end-to-end tests).
pub fn generate_speakers(n: usize, seed: u64, cfg: &SpeakerGenConfig) -> Vec<SyntheticSpeaker> {
    let n_female = n.div_ceil(2);
    let n_male = n / 2;
    // formant slot permutations per gender: every pair of same-gender
    // speakers lands in distinct F1 and F2 slots, so within-bank formant
    // distance is bounded below by construction (like the f0 slots)
    let mut bank_r = rng::stream(seed, 0xF1);
    let perm = |m: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let mut p: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            p.swap(i, r.gen_range(0..=i));
        }
        p
    };
    let f1_perm = [perm(n_female, &mut bank_r), perm(n_male, &mut bank_r)];
    let f2_perm = [perm(n_female, &mut bank_r), perm(n_male, &mut bank_r)];
    let mut speakers = Vec::with_capacity(n);
    for i in 0..n {
        let identity_seed = rng::derive(seed, i as u64);
        let mut r = rng::stream(identity_seed, 0xF0);
        let female = i % 2 == 0;
        let (lo, hi) = if female { cfg.female_f0_range } else { cfg.male_f0_range };
        let (slot, slots) = if female { (i / 2, n_female) } else { (i / 2, n_male) };
        let slot_w = (hi - lo) / slots as f64;
        let base_f0_hz = lo + (slot as f64 + 0.5) * slot_w + r.gen_range(-0.2..0.2) * slot_w;
        let g = usize::from(!female);
        let fslot = |perm: &[usize], flo: f64, fhi: f64, r: &mut rand_chacha::ChaCha8Rng| {
            let w = (fhi - flo) / slots as f64;
            flo + (perm[slot] as f64 + 0.5) * w + r.gen_range(-0.2..0.2) * w
        };
        let formants = vec![
            (fslot(&f1_perm[g], 300.0, 900.0, &mut r), r.gen_range(50.0..110.0)),
            (fslot(&f2_perm[g], 1000.0, 2200.0, &mut r), r.gen_range(70.0..140.0)),
            (r.gen_range(2300.0..3200.0), r.gen_range(100.0..220.0)),
        ];
        let (age_band, jlo, jhi) = &cfg.jitter_bands[i % cfg.jitter_bands.len()];
        speakers.push(SyntheticSpeaker {
            speaker_id: format!("spk{i:03}"),
            identity_seed,
            base_f0_hz,
            formants,
            jitter: r.gen_range(*jlo..*jhi),
            shimmer: r.gen_range(cfg.shimmer_range.0..cfg.shimmer_range.1),
            gender: if female { "female".into() } else { "male".into() },
            age_band: age_band.clone(),
        });
    }
    speakers
}

/// Sum of a few slow sinusoids in [lo_hz, hi_hz], normalized to [-1, 1].
struct SlowMod {
    terms: Vec<(f64, f64)>, // (freq_hz, phase)
}

impl SlowMod {
    fn new(r: &mut impl Rng, lo_hz: f64, hi_hz: f64) -> Self {
        let terms = (0..3).map(|_| (r.gen_range(lo_hz..hi_hz), r.gen_range(0.0..TAU))).collect();
        SlowMod { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|&(f, p)| (TAU * f * t + p).sin()).sum::<f64>() / 3.0
    }
}

/// Two-pole resonator cascade over the signal, one biquad per formant.
fn formant_filter(x: &[f64], formants: &[(f64, f64)], sample_rate: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(fc, bw) in formants {
        let r = (-std::f64::consts::PI * bw / sample_rate).exp();
        let theta = TAU * fc / sample_rate;
        let (a1, a2) = (-2.0 * r * theta.cos(), r * r);
        let g = 1.0 - r;
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let out = g * *v - a1 * y1 - a2 * y2;
            y2 = y1;
            y1 = out;
            *v = out;
        }
    }
    y
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Synthesize one utterance: a jittered harmonic source at the speaker's f0
/// with the upper partials shaped by the formant resonances, under a random
/// amplitude envelope. Deterministic given (identity_seed, utt_seed); the
/// utterance seed varies envelope and micro-prosody only.
pub fn synth_utterance(spk: &SyntheticSpeaker, duration_s: f64, utt_seed: u64) -> Result<Waveform> {
    if duration_s < 0.5 {
        return Err(DeluluError::Contract(format!(
            "synth_utterance: duration {duration_s} s below minimum 0.5 s"
        )));
    }
    let sr = crate::audio::DEFAULT_SAMPLE_RATE;
    let n = (duration_s * sr as f64).round() as usize;
    let mut r = rng::stream(rng::derive(spk.identity_seed, utt_seed), 0xA0);

    let f0_mod = SlowMod::new(&mut r, 2.0, 8.0);
    let env_mod = SlowMod::new(&mut r, 1.0, 4.0);
    let shimmer_mod = SlowMod::new(&mut r, 6.0, 14.0);
    // per-utterance prosody: the mean pitch drifts up to +-5% around the
    // speaker's base f0, so utterance-level pitch statistics overlap between
    // neighboring speakers and identity must come from the formant structure
    let f0_offset: f64 = r.gen_range(-0.05..0.05) + r.gen_range(-0.3..0.3) * spk.jitter;

    let max_f0 = spk.base_f0_hz * (1.0 + f0_offset.abs() + spk.jitter);
    let n_harm = ((3800.0 / max_f0).floor() as usize).max(2);
    let harm_phases: Vec<f64> = (0..=n_harm).map(|_| r.gen_range(0.0..TAU)).collect();

    let mut fund = vec![0.0; n];
    let mut harm = vec![0.0; n];
    let mut phase = 0.0;
    for i in 0..n {
        let t = i as f64 / sr as f64;
        let f0 = spk.base_f0_hz * (1.0 + f0_offset + spk.jitter * f0_mod.at(t));
        phase += TAU * f0 / sr as f64;
        fund[i] = (phase + harm_phases[1]).sin();
        let mut s = 0.0;
        for h in 2..=n_harm {
            s += (h as f64 * phase + harm_phases[h]).sin() / h as f64;
        }
        harm[i] = s;
    }
    let mut filtered = formant_filter(&harm, &spk.formants, sr as f64);
    let frms = rms(&filtered);
    if frms > 1e-12 {
        let s = 1.0 / frms;
        for v in filtered.iter_mut() {
            *v *= s;
        }
    }

    let ramp = (0.01 * sr as f64) as usize; // 10 ms onset/offset
    let mut out = vec![0.0; n];
    for i in 0..n {
        let t = i as f64 / sr as f64;
        let env = (0.55 + 0.45 * env_mod.at(t)).max(0.08)
            * (1.0 + spk.shimmer * shimmer_mod.at(t))
            * (i.min(n - 1 - i).min(ramp) as f64 / ramp as f64).min(1.0);
        out[i] = env * (0.7 * fund[i] + 0.6 * filtered[i]);
    }
    let peak = out.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if peak > 1e-12 {
        let s = 0.5 / peak;
        for v in out.iter_mut() {
            *v *= s;
        }
    }
    Waveform::new(out, sr)
}

/// Babble noise: several simultaneous synthetic utterances summed and
/// RMS-normalized to 0.1.
pub fn make_babble(bank: &[SyntheticSpeaker], duration_s: f64, seed: u64) -> Result<Waveform> {
    if bank.len() < 2 {
        return Err(DeluluError::Contract(format!(
            "make_babble: need at least 2 speakers, got {}",
            bank.len()
        )));
    }
    let mut r = rng::stream(seed, 0xBA);
    let n_overlap = 3 + (r.gen_range(0..2usize));
    let sr = crate::audio::DEFAULT_SAMPLE_RATE;
    let n = (duration_s * sr as f64).round() as usize;
    let mut sum = vec![0.0; n];
    for j in 0..n_overlap {
        let spk = &bank[r.gen_range(0..bank.len())];
        let w = synth_utterance(spk, duration_s, rng::derive(seed, 0x1000 + j as u64))?;
        for (a, b) in sum.iter_mut().zip(&w.samples) {
            *a += b;
        }
    }
    let cur = rms(&sum);
    if cur < 1e-12 {
        return Err(DeluluError::Numeric("make_babble: silent mixture".into()));
    }
    let s = 0.1 / cur;
    for v in sum.iter_mut() {
        *v *= s;
    }
    Waveform::new(sum, sr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::spectrum::{dominant_frequency_in_band, spectral_flatness};

    fn test_speaker(f0: f64) -> SyntheticSpeaker {
        SyntheticSpeaker {
            speaker_id: "t".into(),
            identity_seed: 99,
            base_f0_hz: f0,
            formants: vec![(500.0, 90.0), (1500.0, 120.0), (2500.0, 160.0)],
            jitter: 0.005,
            shimmer: 0.04,
            gender: "female".into(),
            age_band: "18-35".into(),
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spk = test_speaker(180.0);
        let a = synth_utterance(&spk, 0.6, 7).unwrap();
        let b = synth_utterance(&spk, 0.6, 7).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn different_utt_seed_varies_content_and_drifts_pitch() {
        let spk = test_speaker(180.0);
        let a = synth_utterance(&spk, 1.0, 1).unwrap();
        let b = synth_utterance(&spk, 1.0, 2).unwrap();
        assert_ne!(a.samples, b.samples);
        // the fundamental stays within the +-5% prosody band of the base f0
        // (band-limited: formant-shaped harmonics can outweigh it globally)
        let fa = dominant_frequency_in_band(&a.samples, a.sample_rate_hz, 90.0, 270.0);
        let fb = dominant_frequency_in_band(&b.samples, b.sample_rate_hz, 90.0, 270.0);
        assert!((fa - 180.0).abs() < 0.06 * 180.0 + 3.0, "fa={fa}");
        assert!((fb - 180.0).abs() < 0.06 * 180.0 + 3.0, "fb={fb}");
    }

    #[test]
    fn spectral_peaks_track_speaker_f0() {
        for f0 in [100.0, 220.0] {
            let w = synth_utterance(&test_speaker(f0), 1.0, 3).unwrap();
            let f = dominant_frequency_in_band(&w.samples, w.sample_rate_hz, 0.6 * f0, 1.5 * f0);
            assert!((f - f0).abs() < 0.06 * f0 + 3.0, "expected ~{f0}, got {f}");
        }
    }

    #[test]
    fn duration_below_half_second_rejected() {
        assert!(synth_utterance(&test_speaker(150.0), 0.4, 1).is_err());
    }

    #[test]
    fn babble_contract() {
        let bank = generate_speakers(5, 42, &SpeakerGenConfig::default());
        let b1 = make_babble(&bank, 0.8, 11).unwrap();
        let b2 = make_babble(&bank, 0.8, 11).unwrap();
        assert_eq!(b1.samples, b2.samples);
        assert!((b1.rms() - 0.1).abs() < 1e-9);
        // flatter than any single constituent-style utterance
        let single = synth_utterance(&bank[0], 0.8, 1).unwrap();
        assert!(spectral_flatness(&b1.samples) > spectral_flatness(&single.samples));
        assert!(make_babble(&bank[..1], 0.8, 1).is_err());
    }

    #[test]
    fn speaker_bank_is_reproducible_and_tagged() {
        let cfg = SpeakerGenConfig::default();
        let a = generate_speakers(6, 1, &cfg);
        let b = generate_speakers(6, 1, &cfg);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.iter().filter(|s| s.gender == "female").count() == 3);
        for s in &a {
            let (lo, hi) =
                if s.gender == "female" { cfg.female_f0_range } else { cfg.male_f0_range };
            assert!(s.base_f0_hz >= lo - 5.0 && s.base_f0_hz <= hi + 5.0);
        }
    }
}
