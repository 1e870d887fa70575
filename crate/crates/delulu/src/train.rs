//! Dual-objective training: masked cluster prediction on the clean input
//! plus a clean/noisy denoising alignment term, combined as
//! `mask_loss + lambda * denoise_loss`.
//!
//! All per-step randomness (batch choice, masks, noise) is a pure function
//! of (seed, step), so an interrupted run resumed from a checkpoint is
//! bit-identical to an uninterrupted one.

use crate::audio::{
    generate_speakers, make_babble, make_colored_noise, mix_noise, read_wav, sample_snr_db,
    ManifestRecord, SpeakerGenConfig, Waveform,
};
use crate::cluster::PseudoLabelSet;
use crate::encoder::{
    load_checkpoint, register_params, save_checkpoint, student_forward, Checkpoint, EncoderConfig,
    EncoderParams, FrameSequence, ParamNodes,
};
use crate::error::{DeluluError, Result};
use crate::numerics::{
    adamw_step, clip_global_norm, Graph, LrSchedule, NodeId, OptimizerState, Tensor,
};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Per-frame span-start probability.
    pub mask_prob: f64,
    /// Span length in frames.
    pub span_len: usize,
    /// Concrete masked position set (sorted, deduplicated).
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(DeluluError::Contract(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub decay_power: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub mask_prob: f64,
    pub span_len: usize,
    pub snr_range_db: (f64, f64),
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    /// Feed the noisy waveform to the masked-prediction branch instead of
    /// the clean one.
    pub mask_on_noisy: bool,
    pub seed: u64,
    /// Resume from this checkpoint instead of a fresh initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            warmup_steps: 400,
            peak_lr: 5e-4,
            decay_power: 1.0,
            batch_size: 2,
            lambda: 1.0,
            mask_prob: 0.08,
            span_len: 10,
            snr_range_db: (15.0, 25.0),
            clip_norm: 10.0,
            checkpoint_every: 1000,
            mask_on_noisy: false,
            seed: 0,
            resume: None,
        }
    }
}

/// Each frame starts a span with probability p; a span covers
/// min(span_len, T - start) frames; the mask is the union of spans.
pub fn sample_mask(t: usize, mask_prob: f64, span_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut masked = vec![false; t];
    for start in 0..t {
        if rng.gen::<f64>() < mask_prob {
            for slot in masked.iter_mut().skip(start).take(span_len) {
                *slot = true;
            }
        }
    }
    (0..t).filter(|&i| masked[i]).collect()
}

/// Resample until at least one masked and one unmasked frame remain.
pub fn sample_mask_for_training(
    t: usize,
    mask_prob: f64,
    span_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if t < 2 {
        return Err(DeluluError::Contract(format!("need at least 2 frames to mask, got {t}")));
    }
    for _ in 0..1000 {
        let m = sample_mask(t, mask_prob, span_len, rng);
        if !m.is_empty() && m.len() < t {
            return Ok(m);
        }
    }
    Err(DeluluError::Contract(format!(
        "mask sampling failed 1000 times (p={mask_prob}, l={span_len}, T={t}); \
         cannot leave both masked and unmasked frames"
    )))
}

/// Eq-style denoising distance on plain frame sequences:
/// (1/T) sum over unpadded t of ||h_clean(t) - h_noisy(t)||^2.
pub fn denoising_loss(
    h_clean: &FrameSequence,
    h_noisy: &FrameSequence,
    pad_mask: Option<&[bool]>,
) -> Result<f64> {
    if h_clean.values.shape() != h_noisy.values.shape() {
        return Err(DeluluError::Shape {
            op: "denoising_loss",
            lhs: h_clean.values.shape().to_vec(),
            rhs: h_noisy.values.shape().to_vec(),
        });
    }
    let t = h_clean.n_frames();
    if let Some(pm) = pad_mask {
        if pm.len() != t {
            return Err(DeluluError::Contract(format!(
                "pad mask length {} != frame count {t}",
                pm.len()
            )));
        }
    }
    let unpadded: Vec<usize> =
        (0..t).filter(|&i| pad_mask.map_or(true, |pm| !pm[i])).collect();
    if unpadded.is_empty() {
        return Err(DeluluError::Contract("all frames padded".into()));
    }
    let sum: f64 = unpadded
        .iter()
        .map(|&i| {
            h_clean
                .frame(i)
                .iter()
                .zip(h_noisy.frame(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / unpadded.len() as f64)
}

/// mask_loss + lambda * denoise_loss, with finiteness checks.
pub fn total_loss(mask_loss: f64, denoise_loss: f64, w: LossWeights) -> Result<f64> {
    w.validate()?;
    if !mask_loss.is_finite() || !denoise_loss.is_finite() {
        return Err(DeluluError::Numeric(format!(
            "non-finite loss: mask {mask_loss}, denoise {denoise_loss}"
        )));
    }
    Ok(mask_loss + w.lambda * denoise_loss)
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub utt_id: String,
    pub clean: Waveform,
    pub noisy: Waveform,
    /// Masked frame positions, all < the aligned frame count.
    pub mask: Vec<usize>,
    /// Pseudo-labels; aligned to the student frame count within +-2.
    pub labels: Vec<u16>,
    pub pad_mask: Option<Vec<bool>>,
}

/// Graph nodes of the two losses for one example.
pub struct ExampleLosses {
    pub mask_loss: NodeId,
    pub denoise_loss: NodeId,
}

/// Build both objectives for one example inside `g`. The clean branch of
/// the denoising term is detached: it is a stop-gradient target, which
/// rules out the constant-collapse solution of a symmetric form.
pub fn build_example_losses(
    g: &mut Graph,
    pn: &ParamNodes,
    enc_cfg: &EncoderConfig,
    ex: &TrainExample,
    mask_on_noisy: bool,
) -> Result<ExampleLosses> {
    if ex.clean.samples.len() != ex.noisy.samples.len() {
        return Err(DeluluError::Contract(format!(
            "clean/noisy length mismatch for {}: {} vs {}",
            ex.utt_id,
            ex.clean.samples.len(),
            ex.noisy.samples.len()
        )));
    }
    let t_student = enc_cfg.output_length(ex.clean.samples.len())?;
    let diff = t_student.abs_diff(ex.labels.len());
    if diff > 2 {
        return Err(DeluluError::Contract(format!(
            "{}: {} labels vs {} student frames, >2 apart: frame-rate mismatch; check strides",
            ex.utt_id,
            ex.labels.len(),
            t_student
        )));
    }
    let t_common = t_student.min(ex.labels.len());
    if ex.mask.iter().any(|&m| m >= t_common) {
        return Err(DeluluError::Contract(format!(
            "{}: mask position beyond aligned frame count {t_common}",
            ex.utt_id
        )));
    }
    if ex.mask.is_empty() {
        return Err(DeluluError::Contract(format!("{}: empty mask", ex.utt_id)));
    }
    let pad = ex.pad_mask.as_deref();

    let masked_input = if mask_on_noisy { &ex.noisy } else { &ex.clean };
    let masked_out =
        student_forward(g, pn, enc_cfg, &masked_input.samples, Some(&ex.mask), pad, true)?;
    // the denoising target is always the unmasked clean pass
    let clean_out = student_forward(g, pn, enc_cfg, &ex.clean.samples, None, pad, false)?;
    let noisy_out = student_forward(g, pn, enc_cfg, &ex.noisy.samples, None, pad, false)?;

    let mut labels: Vec<usize> = ex.labels.iter().map(|&l| l as usize).collect();
    labels.resize(t_student, 0); // rows beyond t_common are never selected
    let lp = g.log_softmax(masked_out.logits.expect("logits requested"))?;
    let mask_loss = g.nll_masked(lp, &labels, &ex.mask)?;

    let target = g.detach(clean_out.frames)?;
    let neg = g.scale(noisy_out.frames, -1.0)?;
    let mut d = g.add(target, neg)?;
    let mut t_unpadded = t_student;
    if let Some(pm) = pad {
        let padded: Vec<usize> = (0..t_student.min(pm.len()))
            .filter(|&i| pm[i])
            .collect();
        t_unpadded = t_student - padded.len();
        if t_unpadded == 0 {
            return Err(DeluluError::Contract(format!("{}: all frames padded", ex.utt_id)));
        }
        if !padded.is_empty() {
            let zero = g.constant(Tensor::zeros(vec![enc_cfg.model_dim]));
            d = g.mask_rows(d, &padded, zero)?;
        }
    }
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    let denoise_loss = g.scale(s, 1.0 / t_unpadded as f64)?;
    Ok(ExampleLosses { mask_loss, denoise_loss })
}

/// Batch losses: per-example losses averaged, then combined with lambda.
pub fn build_batch_loss(
    g: &mut Graph,
    pn: &ParamNodes,
    enc_cfg: &EncoderConfig,
    batch: &[TrainExample],
    w: LossWeights,
    mask_on_noisy: bool,
) -> Result<(NodeId, NodeId, NodeId)> {
    w.validate()?;
    if batch.is_empty() {
        return Err(DeluluError::Contract("empty batch".into()));
    }
    let mut mask_sum = None;
    let mut den_sum = None;
    for ex in batch {
        let l = build_example_losses(g, pn, enc_cfg, ex, mask_on_noisy)?;
        mask_sum = Some(match mask_sum {
            None => l.mask_loss,
            Some(a) => g.add(a, l.mask_loss)?,
        });
        den_sum = Some(match den_sum {
            None => l.denoise_loss,
            Some(a) => g.add(a, l.denoise_loss)?,
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let mask_avg = g.scale(mask_sum.unwrap(), inv)?;
    let den_avg = g.scale(den_sum.unwrap(), inv)?;
    let weighted = g.scale(den_avg, w.lambda)?;
    let total = g.add(mask_avg, weighted)?;
    Ok((total, mask_avg, den_avg))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunningAverages {
    pub mask: f64,
    pub denoise: f64,
    pub total: f64,
    pub n: u64,
}

impl RunningAverages {
    fn update(&mut self, mask: f64, denoise: f64, total: f64) {
        self.n += 1;
        let w = 1.0 / self.n as f64;
        self.mask += w * (mask - self.mask);
        self.denoise += w * (denoise - self.denoise);
        self.total += w * (total - self.total);
    }
}

#[derive(Debug)]
pub struct TrainState {
    /// Completed optimization steps.
    pub step: u64,
    pub params: EncoderParams,
    pub opt: OptimizerState,
    pub averages: RunningAverages,
}

impl TrainState {
    pub fn new(enc_cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(enc_cfg, seed)?;
        let opt = OptimizerState::new(&params.sizes());
        Ok(TrainState { step: 0, params, opt, averages: RunningAverages::default() })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss_mask: f64,
    pub loss_denoise: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

/// One optimization step. The schedule is queried at the 1-based step
/// index so the first update already has a nonzero learning rate.
pub fn train_step(
    state: &mut TrainState,
    batch: &[TrainExample],
    enc_cfg: &EncoderConfig,
    tcfg: &TrainConfig,
    schedule: &LrSchedule,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let pn = register_params(&mut g, &state.params, true);
    let (total, mask_avg, den_avg) = build_batch_loss(
        &mut g,
        &pn,
        enc_cfg,
        batch,
        LossWeights { lambda: tcfg.lambda },
        tcfg.mask_on_noisy,
    )?;
    let report_vals =
        (g.value(total).item(), g.value(mask_avg).item(), g.value(den_avg).item());
    let grads_all = g.backward(total)?;
    let mut grads = Vec::with_capacity(state.params.len());
    for (name, _) in state.params.iter() {
        grads.push(g.leaf_grad(&grads_all, pn.get(name)));
    }
    let grad_norm = clip_global_norm(&mut grads, tcfg.clip_norm);
    let lr = schedule.lr_at(state.step + 1);
    let mut params: Vec<&mut Tensor> = state.params.iter_mut().map(|(_, t)| t).collect();
    adamw_step(&mut params, &grads, &mut state.opt, lr)?;
    state.step += 1;
    state.averages.update(report_vals.1, report_vals.2, report_vals.0);
    Ok(StepReport {
        step: state.step,
        lr,
        loss_mask: report_vals.1,
        loss_denoise: report_vals.2,
        loss_total: report_vals.0,
        grad_norm,
    })
}

/// In-memory corpus for the loop: decoded waveforms plus aligned labels.
struct Corpus {
    utts: Vec<(String, Waveform, Vec<u16>)>,
    noise_bank: Vec<Waveform>,
}

fn load_corpus(
    manifest: &[ManifestRecord],
    labels: &PseudoLabelSet,
    seed: u64,
) -> Result<Corpus> {
    if manifest.is_empty() {
        return Err(DeluluError::Data("empty manifest".into()));
    }
    let mut utts = Vec::with_capacity(manifest.len());
    let mut max_dur = 0.0f64;
    for rec in manifest {
        let seq = labels.labels.get(&rec.utt_id).ok_or_else(|| {
            DeluluError::Data(format!("no pseudo-labels for utterance {}", rec.utt_id))
        })?;
        let w = read_wav(Path::new(&rec.path))?;
        max_dur = max_dur.max(w.duration_s());
        utts.push((rec.utt_id.clone(), w, seq.clone()));
    }
    let rate = utts[0].1.sample_rate_hz;
    let bank_seed = rng::derive_str(seed, "noise-bank");
    let talkers = generate_speakers(6, bank_seed, &SpeakerGenConfig::default());
    let dur = max_dur.max(1.0);
    let mut noise_bank = Vec::new();
    for i in 0..2 {
        noise_bank.push(make_babble(&talkers, dur, rng::derive(bank_seed, 10 + i))?);
        noise_bank.push(make_colored_noise(dur, rate, rng::derive(bank_seed, 20 + i))?);
    }
    Ok(Corpus { utts, noise_bank })
}

/// Deterministic batch for (seed, step): utterance picks, masks, noise
/// clips and SNRs all come from a step-keyed stream.
fn build_batch(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    tcfg: &TrainConfig,
    step: u64,
) -> Result<Vec<TrainExample>> {
    let mut r = rng::stream(rng::derive_str(tcfg.seed, "batch"), step);
    let mut batch = Vec::with_capacity(tcfg.batch_size);
    for _ in 0..tcfg.batch_size {
        let (utt_id, clean, labels) = &corpus.utts[r.gen_range(0..corpus.utts.len())];
        let noise = &corpus.noise_bank[r.gen_range(0..corpus.noise_bank.len())];
        let snr = sample_snr_db(tcfg.snr_range_db, &mut r);
        let noisy = mix_noise(clean, noise, snr)?;
        let t_student = enc_cfg.output_length(clean.samples.len())?;
        let t_common = t_student.min(labels.len());
        let mask = sample_mask_for_training(t_common, tcfg.mask_prob, tcfg.span_len, &mut r)?;
        batch.push(TrainExample {
            utt_id: utt_id.clone(),
            clean: clean.clone(),
            noisy,
            mask,
            labels: labels.clone(),
            pad_mask: None,
        });
    }
    Ok(batch)
}

/// Full training loop: per-step JSONL logging to `workdir/train_log.jsonl`,
/// periodic checkpoints, resumable via `tcfg.resume`. Returns the final
/// checkpoint path.
pub fn train_loop(
    enc_cfg: &EncoderConfig,
    tcfg: &TrainConfig,
    manifest: &[ManifestRecord],
    labels: &PseudoLabelSet,
    workdir: &Path,
) -> Result<PathBuf> {
    enc_cfg.validate()?;
    LossWeights { lambda: tcfg.lambda }.validate()?;
    if tcfg.warmup_steps == 0 || tcfg.warmup_steps >= tcfg.steps {
        return Err(DeluluError::Contract(format!(
            "warmup_steps {} must be in 1..steps ({})",
            tcfg.warmup_steps, tcfg.steps
        )));
    }
    if enc_cfg.n_codes != labels.k {
        return Err(DeluluError::Contract(format!(
            "encoder expects {} codes but labels have k={}",
            enc_cfg.n_codes, labels.k
        )));
    }
    let corpus = load_corpus(manifest, labels, tcfg.seed)?;
    std::fs::create_dir_all(workdir)?;

    let mut state = match &tcfg.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config != *enc_cfg {
                return Err(DeluluError::Contract(format!(
                    "checkpoint {} was trained with a different encoder config",
                    path.display()
                )));
            }
            let opt = ck.optimizer.ok_or_else(|| {
                DeluluError::Data(format!("checkpoint {} has no optimizer state", path.display()))
            })?;
            TrainState {
                step: ck.step,
                params: ck.params,
                opt,
                averages: RunningAverages::default(),
            }
        }
        None => TrainState::new(enc_cfg, rng::derive_str(tcfg.seed, "init"))?,
    };
    if state.step >= tcfg.steps {
        return Err(DeluluError::Contract(format!(
            "resume step {} is already >= total steps {}",
            state.step, tcfg.steps
        )));
    }

    let schedule = LrSchedule::new(tcfg.peak_lr, tcfg.warmup_steps, tcfg.steps, tcfg.decay_power);
    let log_path = workdir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?,
    );
    let mut last_ckpt: Option<PathBuf> = tcfg.resume.clone();

    while state.step < tcfg.steps {
        let batch = build_batch(&corpus, enc_cfg, tcfg, state.step)?;
        let report = match train_step(&mut state, &batch, enc_cfg, tcfg, &schedule) {
            Ok(r) => r,
            Err(e @ DeluluError::Numeric(_)) => {
                let at = last_ckpt
                    .as_ref()
                    .map_or("none".to_string(), |p| p.display().to_string());
                return Err(DeluluError::Numeric(format!(
                    "{e} at step {}; last good checkpoint: {at}",
                    state.step + 1
                )));
            }
            Err(e) => return Err(e),
        };
        serde_json::to_writer(&mut log, &report)?;
        log.write_all(b"\n")?;
        if state.step % tcfg.checkpoint_every == 0 || state.step == tcfg.steps {
            log.flush()?;
            let path = workdir.join(format!("checkpoint_step{}.ckpt", state.step));
            save_checkpoint(
                &path,
                &Checkpoint {
                    config: enc_cfg.clone(),
                    step: state.step,
                    params: state.params.clone(),
                    optimizer: Some(state.opt.clone()),
                },
            )?;
            last_ckpt = Some(path);
        }
    }
    log.flush()?;
    let final_path = workdir.join(format!("checkpoint_step{}.ckpt", state.step));
    if !final_path.exists() {
        save_checkpoint(
            &final_path,
            &Checkpoint {
                config: enc_cfg.clone(),
                step: state.step,
                params: state.params.clone(),
                optimizer: Some(state.opt.clone()),
            },
        )?;
    }
    Ok(final_path)
}

/// Read a training log back as step reports.
pub fn read_train_log(path: &Path) -> Result<Vec<StepReport>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rep: StepReport = serde_json::from_str(line).map_err(|e| {
            DeluluError::Data(format!("{}:{}: bad log line: {e}", path.display(), i + 1))
        })?;
        out.push(rep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_utterance, write_wav, SampleFormat};
    use crate::teacher::TeacherKind;
    use indexmap::IndexMap;

    fn micro_cfg() -> EncoderConfig {
        EncoderConfig {
            conv_channels: 6,
            conv_strides: vec![2, 2],
            conv_kernels: vec![3, 2],
            n_transformer_layers: 1,
            model_dim: 4,
            n_heads: 2,
            ffn_dim: 6,
            proj_dim: 3,
            n_codes: 4,
            ..EncoderConfig::default()
        }
    }

    fn micro_example(seed: u64) -> TrainExample {
        let mut r = rng::stream(seed, 0);
        let n = 14; // 3 student frames under micro_cfg
        let clean = Waveform::new((0..n).map(|_| r.gen_range(-0.4..0.4)).collect(), 16000).unwrap();
        let noisy = Waveform::new((0..n).map(|_| r.gen_range(-0.4..0.4)).collect(), 16000).unwrap();
        TrainExample {
            utt_id: format!("u{seed}"),
            clean,
            noisy,
            mask: vec![1],
            labels: vec![2, 0, 3],
            pad_mask: None,
        }
    }

    #[test]
    fn mask_edge_cases() {
        let mut r = rng::stream(1, 0);
        assert!(sample_mask(20, 0.0, 10, &mut r).is_empty());
        assert_eq!(sample_mask(20, 1.0, 20, &mut r).len(), 20);
        // span truncation at the end
        let m = sample_mask(5, 1.0, 10, &mut r);
        assert_eq!(m, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mask_coverage_matches_inclusion_probability() {
        // P(frame masked) = 1 - (1-p)^l away from the boundary
        let (p, l, t) = (0.08f64, 10usize, 500usize);
        let expect = 1.0 - (1.0 - p).powi(l as i32);
        let mut r = rng::stream(7, 0);
        let mut covered = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            covered += sample_mask(t, p, l, &mut r).len();
        }
        let got = covered as f64 / (draws * t) as f64;
        assert!((got - expect).abs() < 0.02, "coverage {got} vs {expect}");
    }

    #[test]
    fn training_mask_always_leaves_both_sides() {
        let mut r = rng::stream(3, 0);
        for _ in 0..200 {
            let m = sample_mask_for_training(30, 0.08, 10, &mut r).unwrap();
            assert!(!m.is_empty() && m.len() < 30);
        }
        assert!(sample_mask_for_training(30, 0.0, 10, &mut r).is_err());
    }

    #[test]
    fn denoising_loss_hand_values() {
        let fs = |v: Vec<f64>| {
            FrameSequence::new(Tensor::new(vec![v.len(), 1], v).unwrap(), 16.0).unwrap()
        };
        let clean = fs(vec![0.0, 0.0]);
        assert_eq!(denoising_loss(&clean, &clean, None).unwrap(), 0.0);
        let noisy = fs(vec![1.0, 2.0]);
        assert_eq!(denoising_loss(&clean, &noisy, None).unwrap(), 2.5);
        // padded frames are excluded from the mean
        let clean3 = fs(vec![0.0, 0.0, 9.0]);
        let noisy3 = fs(vec![1.0, 2.0, -9.0]);
        let v = denoising_loss(&clean3, &noisy3, Some(&[false, false, true])).unwrap();
        assert_eq!(v, 2.5);
        assert!(denoising_loss(&clean, &noisy3, None).is_err());
    }

    #[test]
    fn zero_noise_means_zero_denoising_loss() {
        // mixing at very high snr leaves the waveform essentially unchanged,
        // so identical forwards give loss 0; here we assert the exact
        // identity case
        let cfg = micro_cfg();
        let params = EncoderParams::init(&cfg, 5).unwrap();
        let mut ex = micro_example(11);
        ex.noisy = ex.clean.clone();
        let mut g = Graph::new();
        let pn = register_params(&mut g, &params, false);
        let l = build_example_losses(&mut g, &pn, &cfg, &ex, false).unwrap();
        assert_eq!(g.value(l.denoise_loss).item(), 0.0);
    }

    #[test]
    fn masked_prediction_hand_values() {
        let mut g = Graph::new();
        // uniform logits, k=256 -> ln 256
        let logits = g.constant(Tensor::zeros(vec![2, 256]));
        let lp = g.log_softmax(logits).unwrap();
        let l = g.nll_masked(lp, &[3, 7], &[0, 1]).unwrap();
        assert!((g.value(l).item() - 256f64.ln()).abs() < 1e-12);

        // hand 2-class example
        let logits = g.constant(
            Tensor::new(vec![3, 2], vec![2.0, 0.0, 9.0, 9.0, 0.0, 2.0]).unwrap(),
        );
        let lp = g.log_softmax(logits).unwrap();
        let l = g.nll_masked(lp, &[0, 0, 0], &[0, 2]).unwrap();
        let sigma = (2f64).exp() / ((2f64).exp() + 1.0);
        let expect = 0.5 * (-sigma.ln() - (1.0 - sigma).ln());
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        assert!((g.value(l).item() - 1.1269).abs() < 1e-4);

        // margin growth drives loss to 0
        let logits = g.constant(Tensor::new(vec![1, 2], vec![50.0, 0.0]).unwrap());
        let lp = g.log_softmax(logits).unwrap();
        let l = g.nll_masked(lp, &[0], &[0]).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn unmasked_logit_rows_get_zero_gradient() {
        let mut g = Graph::new();
        let logits = g.input(
            Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.3).collect()).unwrap(),
            true,
        );
        let lp = g.log_softmax(logits).unwrap();
        let l = g.nll_masked(lp, &[1, 2, 3], &[0, 2]).unwrap();
        let grads = g.backward(l).unwrap();
        let gl = g.leaf_grad(&grads, logits);
        assert!(gl.data()[4..8].iter().all(|&v| v == 0.0), "row 1 should have zero grad");
        assert!(gl.data()[..4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_loss_contract_and_linearity() {
        assert_eq!(total_loss(2.0, 0.5, LossWeights { lambda: 0.0 }).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 0.5, LossWeights { lambda: 1.0 }).unwrap(), 2.5);
        assert_eq!(total_loss(2.0, 0.5, LossWeights { lambda: 2.0 }).unwrap(), 3.0);
        assert!(total_loss(f64::NAN, 0.5, LossWeights { lambda: 1.0 }).is_err());
        assert!(total_loss(1.0, 1.0, LossWeights { lambda: -0.1 }).is_err());
        // total(a) + total(b) == total(a+b) + mask
        let (m, d) = (1.7, 0.3);
        let t = |l: f64| total_loss(m, d, LossWeights { lambda: l }).unwrap();
        assert!((t(0.4) + t(1.1) - (t(1.5) + m)).abs() < 1e-12);
    }

    #[test]
    fn full_step_gradient_matches_finite_differences() {
        use crate::numerics::{finite_diff_grad, max_rel_err};
        let cfg = micro_cfg();
        let params = EncoderParams::init(&cfg, 9).unwrap();
        let ex = micro_example(21);
        let w = LossWeights { lambda: 0.7 };

        // the clean branch is a stop-gradient target, so the reference loss
        // must hold it constant at its base-parameter value
        let target: Tensor = {
            let mut g = Graph::new();
            let pn = register_params(&mut g, &params, false);
            let out = student_forward(&mut g, &pn, &cfg, &ex.clean.samples, None, None, false)
                .unwrap();
            g.value(out.frames).clone()
        };
        let loss_of = |ps: &EncoderParams| -> Result<f64> {
            let mut g = Graph::new();
            let pn = register_params(&mut g, ps, true);
            let masked =
                student_forward(&mut g, &pn, &cfg, &ex.clean.samples, Some(&ex.mask), None, true)?;
            let labels: Vec<usize> = ex.labels.iter().map(|&l| l as usize).collect();
            let lp = g.log_softmax(masked.logits.unwrap())?;
            let nll = g.nll_masked(lp, &labels, &ex.mask)?;
            let mask_l = g.value(nll).item();
            let noisy =
                student_forward(&mut g, &pn, &cfg, &ex.noisy.samples, None, None, false)?;
            let nv = g.value(noisy.frames);
            let t = nv.rows();
            let den: f64 = nv
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / t as f64;
            total_loss(mask_l, den, w)
        };

        let mut g = Graph::new();
        let pn = register_params(&mut g, &params, true);
        let (total, _, _) =
            build_batch_loss(&mut g, &pn, &cfg, std::slice::from_ref(&ex), w, false).unwrap();
        let grads = g.backward(total).unwrap();
        for target in ["conv0.weight", "layer0.ffn.w1", "codes", "mask_embed"] {
            let auto = g.leaf_grad(&grads, pn.get(target));
            let fd = finite_diff_grad(
                |t: &Tensor| {
                    let mut p = params.clone();
                    for (name, pt) in p.iter_mut() {
                        if name == target {
                            pt.data_mut().copy_from_slice(t.data());
                        }
                    }
                    loss_of(&p)
                },
                params.get(target),
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(&auto, &fd);
            assert!(err < 1e-4, "{target}: max rel err {err}");
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = micro_cfg();
        let tcfg = TrainConfig { batch_size: 2, ..Default::default() };
        let sched = LrSchedule::new(tcfg.peak_lr, 4, 100, 1.0);
        let batch = vec![micro_example(1), micro_example(2)];
        let run = || {
            let mut state = TrainState::new(&cfg, 77).unwrap();
            for _ in 0..10 {
                train_step(&mut state, &batch, &cfg, &tcfg, &sched).unwrap();
            }
            state.params
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    fn write_micro_corpus(
        dir: &Path,
        enc_cfg: &EncoderConfig,
    ) -> (Vec<ManifestRecord>, PseudoLabelSet) {
        let spks = generate_speakers(2, 5, &SpeakerGenConfig::default());
        let mut manifest = Vec::new();
        let mut labels = IndexMap::new();
        let mut lr = rng::stream(6, 0);
        for (i, spk) in spks.iter().enumerate() {
            for u in 0..2 {
                let utt_id = format!("s{i}u{u}");
                let w = synth_utterance(spk, 0.5, (i * 10 + u) as u64).unwrap();
                let path = dir.join(format!("{utt_id}.wav"));
                write_wav(&w, &path, SampleFormat::Float32).unwrap();
                let t = enc_cfg.output_length(w.samples.len()).unwrap();
                labels.insert(
                    utt_id.clone(),
                    (0..t).map(|_| lr.gen_range(0..enc_cfg.n_codes as u16)).collect(),
                );
                manifest.push(ManifestRecord {
                    utt_id,
                    speaker_id: spk.speaker_id.clone(),
                    path: path.display().to_string(),
                    duration_s: w.duration_s(),
                    gender: spk.gender.clone(),
                    age_band: spk.age_band.clone(),
                    extra: Default::default(),
                });
            }
        }
        let set = PseudoLabelSet {
            labels,
            k: enc_cfg.n_codes,
            teacher_kind: TeacherKind::Oracle,
            seed: 0,
        };
        (manifest, set)
    }

    #[test]
    fn train_loop_logs_checkpoints_and_resumes_bit_identically() {
        let cfg = micro_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (manifest, labels) = write_micro_corpus(dir.path(), &cfg);
        let tcfg = TrainConfig {
            steps: 12,
            warmup_steps: 3,
            batch_size: 2,
            checkpoint_every: 6,
            seed: 42,
            ..Default::default()
        };

        // uninterrupted run
        let wd_a = dir.path().join("run_a");
        let final_a = train_loop(&cfg, &tcfg, &manifest, &labels, &wd_a).unwrap();
        let log = read_train_log(&wd_a.join("train_log.jsonl")).unwrap();
        assert_eq!(log.len(), 12, "one log line per step");
        assert_eq!(log.last().unwrap().step, 12);
        assert!(log.iter().all(|r| r.loss_total.is_finite() && r.grad_norm.is_finite()));
        assert!(wd_a.join("checkpoint_step6.ckpt").exists());
        assert!(final_a.ends_with("checkpoint_step12.ckpt"));

        // resume from run A's midpoint checkpoint in a fresh workdir;
        // the schedule (total steps) must stay the same across the restart
        let wd_b = dir.path().join("run_b");
        let resumed =
            TrainConfig { resume: Some(wd_a.join("checkpoint_step6.ckpt")), ..tcfg.clone() };
        let final_b = train_loop(&cfg, &resumed, &manifest, &labels, &wd_b).unwrap();

        let a = load_checkpoint(&final_a).unwrap();
        let b = load_checkpoint(&final_b).unwrap();
        assert_eq!(a.step, b.step);
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} differs after resume");
        }
    }

    #[test]
    fn train_loop_rejects_missing_labels() {
        let cfg = micro_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (manifest, mut labels) = write_micro_corpus(dir.path(), &cfg);
        labels.labels.shift_remove("s0u1");
        let tcfg = TrainConfig { steps: 2, warmup_steps: 1, ..Default::default() };
        let err = train_loop(&cfg, &tcfg, &manifest, &labels, &dir.path().join("wd")).unwrap_err();
        assert!(err.to_string().contains("no pseudo-labels"), "{err}");
    }
}
