//! Orchestration shared by the CLI and integration tests: corpus
//! generation, teacher extraction, clustering, training, and the
//! evaluation protocols, each reading and writing the owning module's
//! file formats under one run config.

use crate::audio::{
    make_colored_noise, mix_noise, read_manifest, read_wav, synth_utterance, write_manifest,
    write_wav, ManifestRecord, SampleFormat, SpeakerGenConfig, SyntheticSpeaker, Waveform,
};
use crate::cluster::{self, assign_labels};
use crate::config::{EvalConfig, RunConfig};
use crate::encoder::{load_checkpoint, Checkpoint, EncoderConfig, EncoderParams};
use crate::error::{DeluluError, Result};
use crate::eval::{
    compute_eer, embedding_stats, generate_trials, knn_macro_f1, score_trials, stratified_eer,
    train_downstream, utterance_embedding, write_pca_csv, write_trials, EmbeddingEntry,
    EmbeddingStats, EmbeddingTable, SubgroupEer, Trial,
};
use crate::rng;
use crate::teacher::{teacher_embed, write_teacher_frames, TeacherFrames, TeacherFramesFile};
use crate::train::train_loop;
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SPEAKERS_FILE: &str = "speakers.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PROFILING_FILE: &str = "profiling.jsonl";
pub const TEACHER_FILE: &str = "teacher_frames.bin";
pub const LABELS_FILE: &str = "labels.dlbl";

#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
    /// Also emit a profiling set: 1-3 speaker overlays tagged with
    /// speaker_count and distance-attenuated copies tagged near/mid/far.
    pub profiling: bool,
}

/// Synthesizes the corpus: WAVs under `out/wavs`, the speaker bank as
/// `speakers.json`, and a JSON-lines manifest. Deterministic in the args.
pub fn gen_data(a: &GenDataArgs) -> Result<PathBuf> {
    if a.n_speakers == 0 || a.utts_per_speaker == 0 {
        return Err(DeluluError::Contract("need >= 1 speaker and >= 1 utterance each".into()));
    }
    if a.out.exists() && a.out.read_dir()?.next().is_some() && !a.force {
        return Err(DeluluError::Data(format!(
            "output dir {} is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let wav_dir = a.out.join("wavs");
    std::fs::create_dir_all(&wav_dir)?;

    let speakers = crate::audio::generate_speakers(
        a.n_speakers,
        rng::derive_str(a.seed, "speakers"),
        &SpeakerGenConfig::default(),
    );
    let mut spk_json = serde_json::to_string_pretty(&speakers)?;
    spk_json.push('\n');
    std::fs::write(a.out.join(SPEAKERS_FILE), spk_json)?;

    let mut records = Vec::new();
    for spk in &speakers {
        for u in 0..a.utts_per_speaker {
            let utt_id = format!("{}_u{u:03}", spk.speaker_id);
            let utt_seed = rng::derive(rng::derive_str(a.seed, "utt"), rng::fnv1a(utt_id.as_bytes()));
            let w = synth_utterance(spk, a.duration_s, utt_seed)?;
            let path = wav_dir.join(format!("{utt_id}.wav"));
            write_wav(&w, &path, SampleFormat::Float32)?;
            records.push(ManifestRecord {
                utt_id,
                speaker_id: spk.speaker_id.clone(),
                path: path.to_string_lossy().into_owned(),
                duration_s: w.duration_s(),
                gender: spk.gender.clone(),
                age_band: spk.age_band.clone(),
                extra: BTreeMap::new(),
            });
        }
    }
    let manifest_path = a.out.join(MANIFEST_FILE);
    write_manifest(&records, &manifest_path)?;

    if a.profiling {
        write_profiling_set(a, &speakers, &wav_dir)?;
    }
    Ok(manifest_path)
}

/// Profiling label functions: speaker-count from 1-3 overlaid speakers,
/// distance from an attenuation level.
fn write_profiling_set(
    a: &GenDataArgs,
    speakers: &[SyntheticSpeaker],
    wav_dir: &Path,
) -> Result<()> {
    let seed = rng::derive_str(a.seed, "profiling");
    let mut records = Vec::new();
    let distances: [(&str, f64); 3] = [("near", 1.0), ("mid", 0.5), ("far", 0.25)];
    for i in 0..(3 * speakers.len().min(12)) {
        let n_overlay = 1 + i % 3;
        let mut mix = vec![0.0; (a.duration_s * 16000.0) as usize];
        let mut rate = 16000;
        for j in 0..n_overlay {
            let spk = &speakers[(i + j * 7) % speakers.len()];
            let w = synth_utterance(spk, a.duration_s, rng::derive(seed, (i * 8 + j) as u64))?;
            rate = w.sample_rate_hz;
            mix.truncate(w.samples.len());
            for (m, s) in mix.iter_mut().zip(&w.samples) {
                *m += s / n_overlay as f64;
            }
        }
        let (dist_tag, gain) = distances[i % 3];
        for m in &mut mix {
            *m *= gain;
        }
        let lead = &speakers[i % speakers.len()];
        let utt_id = format!("prof_{i:03}");
        let path = wav_dir.join(format!("{utt_id}.wav"));
        let w = Waveform::new(mix, rate)?;
        write_wav(&w, &path, SampleFormat::Float32)?;
        let mut extra = BTreeMap::new();
        extra.insert("speaker_count".to_string(), serde_json::json!(n_overlay.to_string()));
        extra.insert("distance".to_string(), serde_json::json!(dist_tag));
        records.push(ManifestRecord {
            utt_id,
            speaker_id: lead.speaker_id.clone(),
            path: path.to_string_lossy().into_owned(),
            duration_s: w.duration_s(),
            gender: lead.gender.clone(),
            age_band: lead.age_band.clone(),
            extra,
        });
    }
    write_manifest(&records, &a.out.join(PROFILING_FILE))
}

/// Speaker bank saved next to a manifest by `gen_data`.
pub fn load_speaker_bank(manifest_path: &Path) -> Result<Vec<SyntheticSpeaker>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let p = dir.join(SPEAKERS_FILE);
    let raw = std::fs::read_to_string(&p).map_err(|e| {
        DeluluError::Data(format!(
            "{}: {e}; the oracle teacher needs the speaker bank written by gen-data",
            p.display()
        ))
    })?;
    Ok(serde_json::from_str(&raw)?)
}

/// Teacher features for every manifest utterance, written to
/// `workdir/teacher_frames.bin`. Returns (path, utterance count).
pub fn teacher_extract(cfg: &RunConfig, manifest_path: &Path) -> Result<(PathBuf, usize)> {
    cfg.validate()?;
    let manifest = read_manifest(manifest_path)?;
    let bank = match cfg.teacher.kind {
        crate::teacher::TeacherKind::Oracle => Some(load_speaker_bank(manifest_path)?),
        crate::teacher::TeacherKind::Spectral => None,
    };
    let mut frames = Vec::with_capacity(manifest.len());
    for rec in &manifest {
        let w = read_wav(Path::new(&rec.path))?;
        let spk = match &bank {
            Some(b) => Some(
                b.iter().find(|s| s.speaker_id == rec.speaker_id).ok_or_else(|| {
                    DeluluError::Data(format!("speaker {} not in speaker bank", rec.speaker_id))
                })?,
            ),
            None => None,
        };
        frames.push(teacher_embed(&w, &cfg.teacher, spk, &rec.utt_id)?);
    }
    std::fs::create_dir_all(&cfg.workdir)?;
    let out = cfg.workdir.join(TEACHER_FILE);
    write_teacher_frames(&out, &frames)?;
    Ok((out, frames.len()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub n_frames: usize,
    pub n_utts: usize,
    pub inertia: f64,
}

/// Fits k-means on all teacher frames and writes per-utterance pseudo-labels
/// to `workdir/labels.dlbl`.
pub fn cluster_frames(cfg: &RunConfig) -> Result<(PathBuf, ClusterReport)> {
    let mut file = TeacherFramesFile::open(
        &cfg.workdir.join(TEACHER_FILE),
        cfg.teacher.frame_period_ms,
        cfg.teacher.kind,
    )?;
    let mut all = Vec::new();
    let mut frames: Vec<TeacherFrames> = Vec::new();
    let utt_ids: Vec<String> = file.utt_ids().map(str::to_string).collect();
    for utt in &utt_ids {
        frames.push(file.get(utt)?);
    }
    let dim = frames[0].frames.dim();
    for tf in &frames {
        all.extend_from_slice(tf.frames.values.data());
    }
    let n_frames = all.len() / dim;
    if cfg.cluster.k > n_frames {
        return Err(DeluluError::Data(format!(
            "k={} exceeds the {} available teacher frames",
            cfg.cluster.k, n_frames
        )));
    }
    let model = cluster::fit(&all, dim, &cfg.cluster)?;
    let mut set = assign_labels(&model, &frames)?;
    set.seed = cfg.cluster.seed;
    let out = cfg.workdir.join(LABELS_FILE);
    cluster::write_labels(&out, &set)?;
    let report = ClusterReport {
        k: model.k,
        n_frames,
        n_utts: frames.len(),
        inertia: model.inertia,
    };
    Ok((out, report))
}

/// Runs the training loop against `workdir/labels.dlbl`; returns the final
/// checkpoint path.
pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let manifest = read_manifest(&cfg.manifest)?;
    let labels = cluster::read_labels(&cfg.workdir.join(LABELS_FILE))?;
    train_loop(&cfg.encoder, &cfg.train, &manifest, &labels, &cfg.workdir)
}

/// Writes a step-0 checkpoint with freshly initialized parameters, for
/// random-baseline evaluation.
pub fn init_checkpoint(cfg: &RunConfig, path: &Path) -> Result<()> {
    let params = EncoderParams::init(&cfg.encoder, rng::derive_str(cfg.seed, "init"))?;
    crate::encoder::save_checkpoint(
        path,
        &Checkpoint { config: cfg.encoder.clone(), step: 0, params, optimizer: None },
    )
}

/// Pooled embeddings for every manifest utterance, with demographic and
/// profiling tags attached. `corrupt_snr_db` scores on noise-corrupted
/// copies (deterministic per utterance).
pub fn extract_embeddings(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    manifest: &[ManifestRecord],
    normalize: bool,
    layer: Option<usize>,
    corrupt_snr_db: Option<f64>,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(enc_cfg.model_dim, normalize);
    // per-utterance forwards are independent; parallelism never changes the
    // values, only the wall time
    let entries: Vec<Result<EmbeddingEntry>> = manifest
        .par_iter()
        .map(|rec| {
            let mut w = read_wav(Path::new(&rec.path))?;
            if let Some(snr) = corrupt_snr_db {
                let noise = make_colored_noise(
                    w.duration_s(),
                    w.sample_rate_hz,
                    rng::fnv1a(rec.utt_id.as_bytes()),
                )?;
                w = mix_noise(&w, &noise, snr)?;
            }
            let vector = utterance_embedding(params, enc_cfg, &w, normalize, layer)?;
            let mut tags = BTreeMap::new();
            tags.insert("gender".to_string(), rec.gender.clone());
            tags.insert("age_band".to_string(), rec.age_band.clone());
            for (k, v) in &rec.extra {
                tags.insert(
                    k.clone(),
                    v.as_str().map(|s| s.to_string()).unwrap_or_else(|| v.to_string()),
                );
            }
            Ok(EmbeddingEntry { vector, speaker_id: rec.speaker_id.clone(), tags })
        })
        .collect();
    for (rec, entry) in manifest.iter().zip(entries) {
        table.insert(rec.utt_id.clone(), entry?)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvReport {
    pub protocol: String,
    pub n_trials: usize,
    pub eer: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub subgroups: BTreeMap<String, SubgroupEer>,
}

#[derive(Debug, Clone, Default)]
pub struct SvOptions {
    /// Slice EERs by this tag (e.g. gender) in addition to the global EER.
    pub group_by: Option<String>,
    /// Score trials on noise-corrupted copies at this SNR.
    pub corrupt_snr_db: Option<f64>,
    /// Truncate the transformer stack for the embedding.
    pub layer: Option<usize>,
    /// Also write the trial list here.
    pub trials_out: Option<PathBuf>,
}

/// Speaker-verification EER on a manifest, with balanced generated trials.
pub fn eval_sv(
    checkpoint: &Path,
    manifest_path: &Path,
    ecfg: &EvalConfig,
    seed: u64,
    opts: &SvOptions,
) -> Result<SvReport> {
    let ck = load_checkpoint(checkpoint)?;
    let manifest = read_manifest(manifest_path)?;
    let table = extract_embeddings(
        &ck.params,
        &ck.config,
        &manifest,
        ecfg.normalize,
        opts.layer,
        opts.corrupt_snr_db,
    )?;
    let utts: Vec<(String, String)> =
        manifest.iter().map(|r| (r.utt_id.clone(), r.speaker_id.clone())).collect();
    let trials = generate_trials(&utts, ecfg.n_trials, rng::derive_str(seed, "trials"))?;
    if let Some(p) = &opts.trials_out {
        write_trials(p, &trials)?;
    }
    let (eer, threshold) = compute_eer(&score_trials(&table, &trials)?)?;
    let subgroups = match &opts.group_by {
        Some(tag) => {
            // within-subgroup trials only; cross-tag pairs are dropped
            let within: Vec<Trial> = trials
                .iter()
                .filter(|t| {
                    let a = &table.entries[&t.utt_a].tags[tag];
                    a == &table.entries[&t.utt_b].tags[tag]
                })
                .cloned()
                .collect();
            stratified_eer(&table, &within, tag, ecfg.min_subgroup_trials)?
        }
        None => BTreeMap::new(),
    };
    Ok(SvReport {
        protocol: format!(
            "cosine SV, {} trials{}",
            trials.len(),
            opts.corrupt_snr_db.map_or(String::new(), |s| format!(", noisy @ {s} dB"))
        ),
        n_trials: trials.len(),
        eer,
        threshold,
        subgroups,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnReport {
    pub protocol: String,
    pub label_key: String,
    pub n_utts: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub k: usize,
    pub n_folds: usize,
}

/// Zero-shot profiling: KNN macro-F1 over a tag (gender, age_band,
/// speaker_count, distance) under stratified k-fold CV.
pub fn eval_knn(
    checkpoint: &Path,
    manifest_path: &Path,
    ecfg: &EvalConfig,
    label_key: &str,
    layer: Option<usize>,
) -> Result<KnnReport> {
    let ck = load_checkpoint(checkpoint)?;
    let manifest = read_manifest(manifest_path)?;
    let table =
        extract_embeddings(&ck.params, &ck.config, &manifest, ecfg.normalize, layer, None)?;
    let mut labels = IndexMap::new();
    for (utt, e) in &table.entries {
        let v = e.tags.get(label_key).ok_or_else(|| {
            DeluluError::Data(format!("utterance {utt} has no tag {label_key}"))
        })?;
        labels.insert(utt.clone(), v.clone());
    }
    let (f1_mean, f1_std) = knn_macro_f1(&table, &labels, ecfg.knn_k, ecfg.n_folds)?;
    Ok(KnnReport {
        protocol: format!("{}-NN macro-F1, {}-fold CV", ecfg.knn_k, ecfg.n_folds),
        label_key: label_key.to_string(),
        n_utts: table.entries.len(),
        f1_mean,
        f1_std,
        k: ecfg.knn_k,
        n_folds: ecfg.n_folds,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub protocol: String,
    pub n_classes: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// AM-Softmax speaker-ID head on frozen-encoder embeddings. The train
/// manifest fits the head; the held-out manifest must cover the same
/// speakers.
pub fn eval_downstream(
    checkpoint: &Path,
    train_manifest: &Path,
    heldout_manifest: &Path,
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<DownstreamReport> {
    let ck = load_checkpoint(checkpoint)?;
    let build = |p: &Path| -> Result<EmbeddingTable> {
        let manifest = read_manifest(p)?;
        extract_embeddings(&ck.params, &ck.config, &manifest, true, None, None)
    };
    let train_table = build(train_manifest)?;
    let held_table = build(heldout_manifest)?;
    let speakers: IndexMap<String, String> = train_table
        .entries
        .iter()
        .map(|(u, e)| (u.clone(), e.speaker_id.clone()))
        .collect();
    let (head, train_accuracy) = train_downstream(
        &train_table,
        &speakers,
        ecfg.head_epochs,
        ecfg.head_batch,
        ecfg.head_lr,
        ecfg.margin,
        ecfg.scale,
        rng::derive_str(seed, "head"),
    )?;
    let mut correct = 0usize;
    for (utt, e) in &held_table.entries {
        let truth = head.classes.iter().position(|c| c == &e.speaker_id).ok_or_else(|| {
            DeluluError::Data(format!("held-out utterance {utt} has unseen speaker {}", e.speaker_id))
        })?;
        let mut v = e.vector.clone();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= n;
        }
        if head.predict(&v)? == truth {
            correct += 1;
        }
    }
    Ok(DownstreamReport {
        protocol: format!("AM-Softmax head (m={}, s={})", ecfg.margin, ecfg.scale),
        n_classes: head.classes.len(),
        train_accuracy,
        heldout_accuracy: correct as f64 / held_table.entries.len() as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    #[serde(flatten)]
    pub stats: EmbeddingStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca_csv: Option<PathBuf>,
}

pub fn stats(
    checkpoint: &Path,
    manifest_path: &Path,
    normalize: bool,
    pca_csv: Option<&Path>,
) -> Result<StatsReport> {
    let ck = load_checkpoint(checkpoint)?;
    let manifest = read_manifest(manifest_path)?;
    let table = extract_embeddings(&ck.params, &ck.config, &manifest, normalize, None, None)?;
    let stats = embedding_stats(&table)?;
    if let Some(p) = pca_csv {
        write_pca_csv(p, &table, "gender")?;
    }
    Ok(StatsReport { stats, pca_csv: pca_csv.map(Path::to_path_buf) })
}

/// Highest-step `checkpoint_step*.ckpt` in a workdir.
pub fn latest_checkpoint(workdir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(workdir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name
            .strip_prefix("checkpoint_step")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        DeluluError::Data(format!("no checkpoints in {}; run train first", workdir.display()))
    })
}

/// teacher-extract → cluster → train, returning the final checkpoint path.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PathBuf> {
    teacher_extract(cfg, &cfg.manifest)?;
    cluster_frames(cfg)?;
    train(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    K(Vec<usize>),
    Teacher(Vec<crate::teacher::TeacherKind>),
    /// Teacher frame period in ms; incompatible with the encoder geometry
    /// unless the conv strides produce the same rate.
    StrideMs(Vec<f64>),
}

/// `k=256,500` | `teacher=oracle,spectral` | `stride=16,20`
pub fn parse_sweep(s: &str) -> Result<SweepAxis> {
    let (axis, vals) = s
        .split_once('=')
        .ok_or_else(|| DeluluError::Contract(format!("sweep '{s}' is not axis=v1,v2,...")))?;
    let vals: Vec<&str> = vals.split(',').filter(|v| !v.is_empty()).collect();
    if vals.is_empty() {
        return Err(DeluluError::Contract(format!("sweep '{s}' has no values")));
    }
    match axis {
        "k" => Ok(SweepAxis::K(
            vals.iter()
                .map(|v| v.parse().map_err(|e| DeluluError::Contract(format!("bad k '{v}': {e}"))))
                .collect::<Result<_>>()?,
        )),
        "teacher" => Ok(SweepAxis::Teacher(
            vals.iter()
                .map(|v| match *v {
                    "oracle" => Ok(crate::teacher::TeacherKind::Oracle),
                    "spectral" => Ok(crate::teacher::TeacherKind::Spectral),
                    other => Err(DeluluError::Contract(format!("unknown teacher '{other}'"))),
                })
                .collect::<Result<_>>()?,
        )),
        "stride" => Ok(SweepAxis::StrideMs(
            vals.iter()
                .map(|v| {
                    v.parse().map_err(|e| DeluluError::Contract(format!("bad stride '{v}': {e}")))
                })
                .collect::<Result<_>>()?,
        )),
        other => Err(DeluluError::Contract(format!(
            "unknown sweep axis '{other}' (expected k, teacher, or stride)"
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn sweep_points(axis: &SweepAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match axis {
        SweepAxis::K(ks) => ks
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.cluster.k = k;
                c.encoder.n_codes = k;
                (format!("k={k}"), c)
            })
            .collect(),
        SweepAxis::Teacher(kinds) => kinds
            .iter()
            .map(|&kind| {
                let mut c = base.clone();
                c.teacher.kind = kind;
                (format!("teacher={kind:?}").to_lowercase(), c)
            })
            .collect(),
        SweepAxis::StrideMs(periods) => periods
            .iter()
            .map(|&ms| {
                let mut c = base.clone();
                c.teacher.frame_period_ms = ms;
                (format!("stride={ms}"), c)
            })
            .collect(),
    }
}

/// Runs the full pipeline per sweep point under `workdir/ablate/<point>`,
/// evaluating held-out EER. Failed points are recorded and the sweep
/// continues; completed points (existing report.json) are skipped.
pub fn ablate(base: &RunConfig, axis: &SweepAxis) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (point, mut cfg) in sweep_points(axis, base) {
        cfg.workdir = base.workdir.join("ablate").join(point.replace('=', "_"));
        let report_path = cfg.workdir.join("report.json");
        if report_path.exists() {
            let raw = std::fs::read_to_string(&report_path)?;
            rows.push(serde_json::from_str(&raw)?);
            continue;
        }
        std::fs::create_dir_all(&cfg.workdir)?;
        let run = || -> Result<f64> {
            cfg.validate()?;
            let ckpt = run_pipeline(&cfg)?;
            let report = eval_sv(
                &ckpt,
                cfg.eval_manifest_path(),
                &cfg.eval,
                cfg.seed,
                &SvOptions::default(),
            )?;
            Ok(report.eer)
        };
        let row = match run() {
            Ok(eer) => SweepRow { point: point.clone(), eer: Some(eer), error: None },
            Err(e) => SweepRow { point: point.clone(), eer: None, error: Some(e.to_string()) },
        };
        let mut s = serde_json::to_string_pretty(&row)?;
        s.push('\n');
        std::fs::write(&report_path, s)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut out = String::from("| point | EER | status |\n|---|---|---|\n");
    for r in rows {
        let (eer, status) = match (&r.eer, &r.error) {
            (Some(e), _) => (format!("{:.4}", e), "ok".to_string()),
            (None, Some(err)) => ("-".to_string(), format!("error: {err}")),
            (None, None) => ("-".to_string(), "?".to_string()),
        };
        out.push_str(&format!("| {} | {} | {} |\n", r.point, eer, status));
    }
    out
}
