//! RIFF/WAVE reader and writer: mono, PCM-16 or float-32.

use crate::audio::Waveform;
use crate::error::{DeluluError, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn wav_err(msg: impl Into<String>) -> DeluluError {
    DeluluError::Wav(msg.into())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err("truncated RIFF header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(wav_err(format!(
                "truncated chunk {:?}: declares {size} bytes, {} available",
                String::from_utf8_lossy(id),
                bytes.len() - body_start
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err("truncated chunk fmt"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }
    let (codec, channels, rate, bits) = fmt.ok_or_else(|| wav_err("missing fmt chunk"))?;
    let data = data.ok_or_else(|| wav_err("missing data chunk"))?;
    if channels != 1 {
        return Err(wav_err(format!("non-mono: {channels} channels")));
    }
    let samples = match (codec, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
            .collect::<Vec<f64>>(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect::<Vec<f64>>(),
        _ => {
            return Err(wav_err(format!(
                "unsupported codec: format tag {codec}, {bits} bits per sample"
            )))
        }
    };
    if samples.is_empty() {
        return Err(wav_err("empty data chunk"));
    }
    Waveform::new(samples, rate)
}

pub fn write_wav(w: &Waveform, path: &Path, format: SampleFormat) -> Result<()> {
    let (codec, bits): (u16, u16) = match format {
        SampleFormat::Pcm16 => (1, 16),
        SampleFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = bits as u32 / 8;
    let data_len = w.samples.len() as u32 * bytes_per_sample;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&codec.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate_hz * bytes_per_sample).to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        match format {
            SampleFormat::Pcm16 => {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn sine(freq: f64, amp: f64, rate: u32, secs: f64) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n).map(|i| amp * (TAU * freq * i as f64 / rate as f64).sin()).collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let w = sine(1000.0, 0.5, 16000, 0.25);
        write_wav(&w, &path, SampleFormat::Pcm16).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate_hz, 16000);
        assert_eq!(r.samples.len(), w.samples.len());
        let max_diff = w
            .samples
            .iter()
            .zip(&r.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 3.1e-5, "max diff {max_diff}");
    }

    #[test]
    fn float32_round_trip_is_tighter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine32.wav");
        let w = sine(440.0, 0.9, 16000, 0.1);
        write_wav(&w, &path, SampleFormat::Float32).unwrap();
        let r = read_wav(&path).unwrap();
        let max_diff = w
            .samples
            .iter()
            .zip(&r.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-7, "max diff {max_diff}");
    }

    #[test]
    fn empty_file_is_truncated_riff_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        std::fs::write(&path, b"").unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("truncated RIFF header"), "{err}");
    }

    #[test]
    fn non_mono_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let w = sine(440.0, 0.2, 16000, 0.05);
        write_wav(&w, &path, SampleFormat::Pcm16).unwrap();
        // patch channel count to 2
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2;
        std::fs::write(&path, bytes).unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("non-mono"), "{err}");
    }

    #[test]
    fn truncated_data_chunk_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.wav");
        let w = sine(440.0, 0.2, 16000, 0.05);
        write_wav(&w, &path, SampleFormat::Pcm16).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("truncated chunk"), "{err}");
    }

    #[test]
    fn other_sample_rates_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("44k.wav");
        let w = sine(440.0, 0.2, 44100, 0.05);
        write_wav(&w, &path, SampleFormat::Pcm16).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate_hz, 44100);
    }
}
