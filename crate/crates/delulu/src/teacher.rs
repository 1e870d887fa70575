//! Frame-level teachers.
//!
//! Two built-in kinds: an oracle teacher that embeds known speaker identity
//! directly (a stand-in for a strong speaker model), and a spectral teacher
//! producing MFCC-like features that carry no identity signal beyond what
//! the audio itself exposes. Both emit frames at the student frame rate.
//! Frames from any external model can be ingested via the same binary file
//! format (`write_teacher_frames` / `TeacherFramesFile`).

use crate::audio::{SyntheticSpeaker, Waveform};
use crate::encoder::FrameSequence;
use crate::error::{DeluluError, Result};
use crate::numerics::Tensor;
use crate::rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Oracle,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub embed_dim: usize,
    /// Must equal the student's frame period.
    pub frame_period_ms: f64,
    pub sample_rate_hz: u32,
    /// Oracle: seed of the fixed identity projection.
    pub projection_seed: u64,
    /// Oracle: per-frame content noise sigma.
    pub content_noise: f64,
    /// Spectral: mel filterbank size; must be >= embed_dim.
    pub n_mels: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::Oracle,
            embed_dim: 64,
            frame_period_ms: 16.0,
            sample_rate_hz: crate::audio::DEFAULT_SAMPLE_RATE,
            projection_seed: 0x7e4c,
            content_noise: 0.03,
            n_mels: 80,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_period_ms > 0.0) {
            return Err(DeluluError::Contract(format!(
                "teacher frame period must be positive, got {}",
                self.frame_period_ms
            )));
        }
        if self.embed_dim < 8 {
            return Err(DeluluError::Contract(format!(
                "teacher embed_dim must be >= 8, got {}",
                self.embed_dim
            )));
        }
        if self.kind == TeacherKind::Spectral && self.n_mels < self.embed_dim {
            return Err(DeluluError::Contract(format!(
                "spectral teacher needs n_mels >= embed_dim ({} < {})",
                self.n_mels, self.embed_dim
            )));
        }
        Ok(())
    }

    fn hop(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_period_ms / 1000.0).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct TeacherFrames {
    pub frames: FrameSequence,
    pub kind: TeacherKind,
    pub utt_id: String,
}

/// Unit-norm identity vector of a speaker under the fixed projection seed.
pub fn identity_vector(cfg: &TeacherConfig, spk: &SyntheticSpeaker) -> Vec<f64> {
    let mut r = rng::stream(rng::derive(cfg.projection_seed, spk.identity_seed), 1);
    let mut v: Vec<f64> = (0..cfg.embed_dim).map(|_| StandardNormal.sample(&mut r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

pub fn teacher_embed(
    w: &Waveform,
    cfg: &TeacherConfig,
    spk: Option<&SyntheticSpeaker>,
    utt_id: &str,
) -> Result<TeacherFrames> {
    cfg.validate()?;
    if w.sample_rate_hz != cfg.sample_rate_hz {
        return Err(DeluluError::Contract(format!(
            "sample rate {} != teacher's configured {}",
            w.sample_rate_hz, cfg.sample_rate_hz
        )));
    }
    let t = w.samples.len() / cfg.hop();
    if t == 0 {
        return Err(DeluluError::Data(format!(
            "waveform too short for one teacher frame ({} samples < hop {})",
            w.samples.len(),
            cfg.hop()
        )));
    }
    let values = match cfg.kind {
        TeacherKind::Oracle => {
            let spk = spk.ok_or_else(|| {
                DeluluError::Data(format!(
                    "oracle teacher needs a speaker record for utterance {utt_id}"
                ))
            })?;
            oracle_frames(w, cfg, spk, t)
        }
        TeacherKind::Spectral => spectral_frames(w, cfg, t),
    };
    Ok(TeacherFrames {
        frames: FrameSequence::new(Tensor::new(vec![t, cfg.embed_dim], values)?, cfg.frame_period_ms)?,
        kind: cfg.kind,
        utt_id: utt_id.to_string(),
    })
}

/// Identity vector plus a small zero-mean content component per frame.
/// The content is the utterance's own spectral features, standardized per
/// dimension over the utterance (so each dimension is exactly zero-mean
/// across frames) and scaled by `content_noise`. Frames of one speaker
/// form a tight cluster around the identity vector, while the spread
/// within the cluster is a deterministic function of the audio content —
/// so a student can in principle predict it, unlike i.i.d. noise.
fn oracle_frames(w: &Waveform, cfg: &TeacherConfig, spk: &SyntheticSpeaker, t: usize) -> Vec<f64> {
    let id = identity_vector(cfg, spk);
    let d = cfg.embed_dim;
    let mut content = spectral_frames(w, cfg, t);
    for j in 0..d {
        let mean = (0..t).map(|i| content[i * d + j]).sum::<f64>() / t as f64;
        let var =
            (0..t).map(|i| (content[i * d + j] - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt().max(1e-8);
        for i in 0..t {
            content[i * d + j] = (content[i * d + j] - mean) / std;
        }
    }
    content
        .iter()
        .enumerate()
        .map(|(i, &c)| id[i % d] + cfg.content_noise * c)
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over an rFFT of size `n_fft`; rows sum filters,
/// columns are FFT bins [0, n_fft/2].
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate_hz as f64 / 2.0;
    let mel_pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * sample_rate_hz as f64 / n_fft as f64;
    let mut fb = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (mel_pts[m], mel_pts[m + 1], mel_pts[m + 2]);
        for b in 0..n_bins {
            let f = bin_hz(b);
            if f > lo && f < hi {
                fb[m][b] = if f <= mid { (f - lo) / (mid - lo) } else { (hi - f) / (hi - mid) };
            }
        }
    }
    fb
}

/// Log mel energies of one frame (already windowed), via rFFT power.
pub fn mel_log_energies(frame: &[f64], fb: &[Vec<f64>]) -> Vec<f64> {
    let n = frame.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    let power: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
    fb.iter()
        .map(|filt| {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            (e + 1e-10).ln()
        })
        .collect()
}

fn dct_ii(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum::<f64>()
                * (2.0 / n).sqrt()
        })
        .collect()
}

/// MFCC-like features: Hann-windowed frames (window = 2 hops), mel log
/// energies, DCT-II down to embed_dim coefficients.
fn spectral_frames(w: &Waveform, cfg: &TeacherConfig, t: usize) -> Vec<f64> {
    let hop = cfg.hop();
    let win = 2 * hop;
    let fb = mel_filterbank(cfg.n_mels, win, cfg.sample_rate_hz);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / win as f64).cos())
        .collect();
    let mut out = Vec::with_capacity(t * cfg.embed_dim);
    let mut frame = vec![0.0; win];
    for f in 0..t {
        let start = f * hop;
        for (i, slot) in frame.iter_mut().enumerate() {
            *slot = w.samples.get(start + i).copied().unwrap_or(0.0) * hann[i];
        }
        let mels = mel_log_energies(&frame, &fb);
        out.extend(dct_ii(&mels, cfg.embed_dim));
    }
    out
}

/// Trim teacher frames to the common length with the student.
pub fn align_frames(student_t: usize, tf: &TeacherFrames) -> Result<TeacherFrames> {
    let teacher_t = tf.frames.n_frames();
    let diff = student_t.abs_diff(teacher_t);
    if diff > 2 {
        return Err(DeluluError::Contract(format!(
            "student has {student_t} frames but teacher has {teacher_t}, >2 frames apart: \
             frame-rate mismatch; check strides"
        )));
    }
    let keep = student_t.min(teacher_t);
    let d = tf.frames.dim();
    let data = tf.frames.values.data()[..keep * d].to_vec();
    Ok(TeacherFrames {
        frames: FrameSequence::new(Tensor::new(vec![keep, d], data)?, tf.frames.frame_period_ms)?,
        kind: tf.kind,
        utt_id: tf.utt_id.clone(),
    })
}

fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

/// Write per-utterance frame blocks plus a JSON byte-offset index
/// (`<path>.index.json`). Block layout: utt_id len (u32 LE) + bytes,
/// T (u32), dim (u32), then T*dim f32 LE values.
pub fn write_teacher_frames(path: &Path, frames: &[TeacherFrames]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut index: BTreeMap<String, u64> = BTreeMap::new();
    let mut offset = 0u64;
    for tf in frames {
        if index.contains_key(&tf.utt_id) {
            return Err(DeluluError::Data(format!("duplicate utterance id {}", tf.utt_id)));
        }
        index.insert(tf.utt_id.clone(), offset);
        let id = tf.utt_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(tf.frames.n_frames() as u32).to_le_bytes())?;
        w.write_all(&(tf.frames.dim() as u32).to_le_bytes())?;
        for &v in tf.frames.values.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        offset += 12 + id.len() as u64 + 4 * tf.frames.values.data().len() as u64;
    }
    w.flush()?;
    let f = std::fs::File::create(index_path(path))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &index)?;
    Ok(())
}

/// Random-access reader over a teacher-frames file via its JSON index.
pub struct TeacherFramesFile {
    file: std::fs::File,
    index: BTreeMap<String, u64>,
    frame_period_ms: f64,
    kind: TeacherKind,
}

impl TeacherFramesFile {
    pub fn open(path: &Path, frame_period_ms: f64, kind: TeacherKind) -> Result<Self> {
        let raw = std::fs::read_to_string(index_path(path)).map_err(|e| {
            DeluluError::Data(format!("cannot read index {}: {e}", index_path(path).display()))
        })?;
        let index: BTreeMap<String, u64> = serde_json::from_str(&raw)?;
        Ok(TeacherFramesFile { file: std::fs::File::open(path)?, index, frame_period_ms, kind })
    }

    pub fn utt_ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&mut self, utt_id: &str) -> Result<TeacherFrames> {
        let &offset = self
            .index
            .get(utt_id)
            .ok_or_else(|| DeluluError::Data(format!("utterance {utt_id} not in teacher file")))?;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut u32buf = [0u8; 4];
        let truncated = || DeluluError::Data("truncated teacher-frames file".into());
        self.file.read_exact(&mut u32buf).map_err(|_| truncated())?;
        let idlen = u32::from_le_bytes(u32buf) as usize;
        let mut idb = vec![0u8; idlen];
        self.file.read_exact(&mut idb).map_err(|_| truncated())?;
        let stored = String::from_utf8(idb)
            .map_err(|_| DeluluError::Data("teacher-frames utt_id is not UTF-8".into()))?;
        if stored != utt_id {
            return Err(DeluluError::Data(format!(
                "index points at {stored}, expected {utt_id}: stale index"
            )));
        }
        self.file.read_exact(&mut u32buf).map_err(|_| truncated())?;
        let t = u32::from_le_bytes(u32buf) as usize;
        self.file.read_exact(&mut u32buf).map_err(|_| truncated())?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut data = vec![0u8; t * dim * 4];
        self.file.read_exact(&mut data).map_err(|_| truncated())?;
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(TeacherFrames {
            frames: FrameSequence::new(Tensor::new(vec![t, dim], values)?, self.frame_period_ms)?,
            kind: self.kind,
            utt_id: utt_id.to_string(),
        })
    }
}
