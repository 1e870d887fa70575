//! Speaker-centric evaluation: pooled utterance embeddings, cosine-scored
//! verification EER (globally and per demographic subgroup), zero-shot KNN
//! macro-F1 under k-fold CV, an AM-Softmax downstream head over a frozen
//! encoder, and embedding-space separation diagnostics.

use crate::audio::Waveform;
use crate::encoder::{register_params, student_forward, EncoderConfig, EncoderParams};
use crate::error::{DeluluError, Result};
use crate::numerics::{adamw_step, Graph, OptimizerState, Tensor};
use crate::rng;
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub vector: Vec<f64>,
    pub speaker_id: String,
    /// Demographic / task tags, e.g. gender, age_band.
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub entries: IndexMap<String, EmbeddingEntry>,
    pub dim: usize,
    /// Whether vectors were L2-normalized at extraction time.
    pub normalized: bool,
}

impl EmbeddingTable {
    pub fn new(dim: usize, normalized: bool) -> Self {
        EmbeddingTable { entries: IndexMap::new(), dim, normalized }
    }

    pub fn insert(&mut self, utt_id: String, entry: EmbeddingEntry) -> Result<()> {
        if entry.vector.len() != self.dim {
            return Err(DeluluError::Contract(format!(
                "embedding for {utt_id} has dim {}, table is {}",
                entry.vector.len(),
                self.dim
            )));
        }
        self.entries.insert(utt_id, entry);
        Ok(())
    }

    pub fn get(&self, utt_id: &str) -> Result<&EmbeddingEntry> {
        self.entries
            .get(utt_id)
            .ok_or_else(|| DeluluError::Data(format!("utterance {utt_id} not in embedding table")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub utt_a: String,
    pub utt_b: String,
    pub target: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl ScoreSet {
    pub fn push(&mut self, score: f64, target: bool) {
        self.scores.push(score);
        self.targets.push(target);
    }
}

/// Mean-pooled final-layer frames for one waveform. `layer` truncates the
/// transformer stack (0 = conv features through the final norm only);
/// `None` uses all layers.
pub fn utterance_embedding(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    w: &Waveform,
    normalize: bool,
    layer: Option<usize>,
) -> Result<Vec<f64>> {
    let mut cfg = cfg.clone();
    if let Some(l) = layer {
        if l > cfg.n_transformer_layers {
            return Err(DeluluError::Contract(format!(
                "layer {l} out of range: encoder has {} transformer layers",
                cfg.n_transformer_layers
            )));
        }
        cfg.n_transformer_layers = l;
    }
    let mut g = Graph::new();
    let pn = register_params(&mut g, params, false);
    let out = student_forward(&mut g, &pn, &cfg, &w.samples, None, None, false)?;
    let pooled = g.mean_pool(out.frames)?;
    let mut v = g.value(pooled).data().to_vec();
    if normalize {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(DeluluError::Numeric("zero-norm embedding".into()));
        }
        for x in &mut v {
            *x /= n;
        }
    }
    Ok(v)
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DeluluError::Shape { op: "cosine_score", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(DeluluError::Numeric("cosine of zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Balanced same/different speaker pairs: exhaustive when few enough,
/// otherwise sampled without replacement. Deterministic under `seed`.
pub fn generate_trials(
    utts: &[(String, String)], // (utt_id, speaker_id)
    n_trials: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            let t = utts[i].1 == utts[j].1;
            let trial =
                Trial { utt_a: utts[i].0.clone(), utt_b: utts[j].0.clone(), target: t };
            if t {
                same.push(trial);
            } else {
                diff.push(trial);
            }
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(DeluluError::Data(
            "trial generation needs both same-speaker and different-speaker pairs".into(),
        ));
    }
    let mut r = rng::stream(seed, 0x7472);
    let per_side = n_trials / 2;
    let mut take = |pool: &mut Vec<Trial>| {
        for i in (1..pool.len()).rev() {
            pool.swap(i, r.gen_range(0..=i));
        }
        pool.truncate(pool.len().min(per_side.max(1)));
    };
    take(&mut same);
    take(&mut diff);
    let mut out = same;
    out.extend(diff);
    Ok(out)
}

/// Trial list file: one `<0|1> <utt_a> <utt_b>` per line.
pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trials {
        writeln!(w, "{} {} {}", t.target as u8, t.utt_a, t.utt_b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let bad = || DeluluError::Data(format!("{}:{}: bad trial line", path.display(), i + 1));
        let flag = parts.next().ok_or_else(bad)?;
        let a = parts.next().ok_or_else(bad)?;
        let b = parts.next().ok_or_else(bad)?;
        let target = match flag {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        out.push(Trial { utt_a: a.to_string(), utt_b: b.to_string(), target });
    }
    Ok(out)
}

pub fn score_trials(table: &EmbeddingTable, trials: &[Trial]) -> Result<ScoreSet> {
    let mut set = ScoreSet::default();
    for t in trials {
        let a = table.get(&t.utt_a)?;
        let b = table.get(&t.utt_b)?;
        set.push(cosine_score(&a.vector, &b.vector)?, t.target);
    }
    Ok(set)
}

fn far_frr_at(threshold: f64, set: &ScoreSet) -> (f64, f64) {
    let (mut fa, mut fr, mut n_t, mut n_n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &t) in set.scores.iter().zip(&set.targets) {
        if t {
            n_t += 1;
            if s < threshold {
                fr += 1;
            }
        } else {
            n_n += 1;
            if s >= threshold {
                fa += 1;
            }
        }
    }
    (fa as f64 / n_n as f64, fr as f64 / n_t as f64)
}

/// Equal error rate with its crossing threshold. Thresholds swept at
/// midpoints of sorted unique scores (plus sentinels past both ends);
/// where FAR and FRR do not meet exactly, both are interpolated linearly
/// between the bracketing thresholds.
pub fn compute_eer(set: &ScoreSet) -> Result<(f64, f64)> {
    let n_t = set.targets.iter().filter(|&&t| t).count();
    let n_n = set.targets.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(DeluluError::Data(format!(
            "EER undefined: {n_t} target and {n_n} non-target trials"
        )));
    }
    let mut uniq = set.scores.clone();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();
    let span = (uniq.last().unwrap() - uniq[0]).max(1.0);
    let mut thresholds = vec![uniq[0] - span];
    for w in uniq.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(uniq.last().unwrap() + span);

    // FRR - FAR goes from -1 (accept everything) to +1 (reject everything);
    // find the sign change and interpolate
    let mut prev = {
        let (fa, fr) = far_frr_at(thresholds[0], set);
        (thresholds[0], fa, fr)
    };
    for &t in &thresholds[1..] {
        let (fa, fr) = far_frr_at(t, set);
        if fr >= fa {
            let (t0, fa0, fr0) = prev;
            let d0 = fa0 - fr0; // > 0 before the crossing
            let d1 = fr - fa; // >= 0 at/after the crossing
            if d0 + d1 < 1e-15 {
                return Ok((fr, t));
            }
            let alpha = d0 / (d0 + d1);
            let eer = fr0 + alpha * (fr - fr0);
            let thr = t0 + alpha * (t - t0);
            return Ok((eer, thr));
        }
        prev = (t, fa, fr);
    }
    unreachable!("FRR reaches 1 and FAR reaches 0 past the max score");
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupEer {
    pub eer: f64,
    pub threshold: f64,
    pub n_trials: usize,
    /// False when the subgroup has fewer trials than the reliability floor.
    pub reliable: bool,
}

/// Per-subgroup EER over within-subgroup trials. Every trial must pair two
/// utterances sharing the `group_by` tag value.
pub fn stratified_eer(
    table: &EmbeddingTable,
    trials: &[Trial],
    group_by: &str,
    min_trials: usize,
) -> Result<BTreeMap<String, SubgroupEer>> {
    let mut buckets: BTreeMap<String, ScoreSet> = BTreeMap::new();
    for t in trials {
        let a = table.get(&t.utt_a)?;
        let b = table.get(&t.utt_b)?;
        let tag_of = |e: &EmbeddingEntry, utt: &str| -> Result<String> {
            e.tags.get(group_by).cloned().ok_or_else(|| {
                DeluluError::Data(format!("utterance {utt} has no tag {group_by}"))
            })
        };
        let ta = tag_of(a, &t.utt_a)?;
        let tb = tag_of(b, &t.utt_b)?;
        if ta != tb {
            return Err(DeluluError::Contract(format!(
                "cross-subgroup trial {} vs {} ({ta} vs {tb}); stratified trials must stay \
                 within one subgroup",
                t.utt_a, t.utt_b
            )));
        }
        buckets
            .entry(ta)
            .or_default()
            .push(cosine_score(&a.vector, &b.vector)?, t.target);
    }
    let mut out = BTreeMap::new();
    for (tag, set) in buckets {
        let (eer, threshold) = compute_eer(&set)?;
        let n_trials = set.scores.len();
        out.insert(tag, SubgroupEer { eer, threshold, n_trials, reliable: n_trials >= min_trials });
    }
    Ok(out)
}

/// Majority-vote KNN (cosine distance) under stratified k-fold CV.
/// Returns (mean macro-F1, std over folds). Vote ties and zero-distance
/// ties break toward the alphabetically first class.
pub fn knn_macro_f1(
    table: &EmbeddingTable,
    labels: &IndexMap<String, String>,
    k_neighbors: usize,
    n_folds: usize,
) -> Result<(f64, f64)> {
    if n_folds < 2 {
        return Err(DeluluError::Contract(format!("need >= 2 folds, got {n_folds}")));
    }
    let mut classes: Vec<String> = labels.values().cloned().collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(DeluluError::Contract(
            "macro-F1 needs at least 2 classes in the label set".into(),
        ));
    }
    // stratified fold assignment: round-robin within each class, in table order
    let mut fold_of: IndexMap<&str, usize> = IndexMap::new();
    for class in &classes {
        let members: Vec<&str> = table
            .entries
            .keys()
            .filter(|u| labels.get(u.as_str()) == Some(class))
            .map(|u| u.as_str())
            .collect();
        if members.len() < n_folds {
            return Err(DeluluError::Data(format!(
                "class {class} has {} examples, fewer than {n_folds} folds",
                members.len()
            )));
        }
        for (i, u) in members.iter().enumerate() {
            fold_of.insert(u, i % n_folds);
        }
    }
    for u in labels.keys() {
        table.get(u)?; // every labeled utterance must have an embedding
    }

    let class_idx = |c: &str| classes.iter().position(|x| x == c).unwrap();
    let mut fold_f1 = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let train: Vec<&str> =
            fold_of.iter().filter(|(_, &f)| f != fold).map(|(&u, _)| u).collect();
        let test: Vec<&str> =
            fold_of.iter().filter(|(_, &f)| f == fold).map(|(&u, _)| u).collect();
        let mut tp = vec![0usize; classes.len()];
        let mut fp = vec![0usize; classes.len()];
        let mut fneg = vec![0usize; classes.len()];
        let mut present = vec![false; classes.len()];
        for &u in &test {
            let q = &table.get(u)?.vector;
            let mut neigh: Vec<(f64, usize)> = train
                .iter()
                .map(|&v| {
                    let d = 1.0 - cosine_score(q, &table.get(v).unwrap().vector).unwrap();
                    (d, class_idx(&labels[v]))
                })
                .collect();
            neigh.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes.len()];
            for &(_, c) in neigh.iter().take(k_neighbors.min(neigh.len())) {
                votes[c] += 1;
            }
            let pred = votes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            let truth = class_idx(&labels[u]);
            present[truth] = true;
            if pred == truth {
                tp[truth] += 1;
            } else {
                fp[pred] += 1;
                fneg[truth] += 1;
            }
        }
        // macro over classes present in this test fold
        let mut f1s = Vec::new();
        for c in 0..classes.len() {
            if !present[c] && fp[c] == 0 {
                continue;
            }
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            f1s.push(if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 });
        }
        fold_f1.push(f1s.iter().sum::<f64>() / f1s.len() as f64);
    }
    let mean = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
    let var = fold_f1.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / fold_f1.len() as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamHead {
    /// (n_classes, dim), rows L2-normalized before scoring.
    pub weights: Vec<f64>,
    pub classes: Vec<String>,
    pub dim: usize,
    pub margin: f64,
    pub scale: f64,
}

impl DownstreamHead {
    fn normalized_rows(&self) -> Result<Vec<f64>> {
        let mut out = self.weights.clone();
        for row in out.chunks_exact_mut(self.dim) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(DeluluError::Numeric("zero-norm class row".into()));
            }
            for x in row {
                *x /= n;
            }
        }
        Ok(out)
    }

    /// Cosine scores of a normalized embedding against all class rows.
    pub fn cosines(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        check_unit(embedding)?;
        let rows = self.normalized_rows()?;
        Ok(rows
            .chunks_exact(self.dim)
            .map(|r| r.iter().zip(embedding).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn predict(&self, embedding: &[f64]) -> Result<usize> {
        let cos = self.cosines(embedding)?;
        Ok(cos
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0)
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(DeluluError::Contract(format!(
            "AM-Softmax input must be L2-normalized (norm {n})"
        )));
    }
    Ok(())
}

/// Cross-entropy over s*(cos_y - m) for the target class and s*cos_j
/// elsewhere. Inputs must already be unit-norm.
pub fn am_softmax_loss(head: &DownstreamHead, embedding: &[f64], label: usize) -> Result<f64> {
    if label >= head.classes.len() {
        return Err(DeluluError::Contract(format!(
            "label {label} out of range for {} classes",
            head.classes.len()
        )));
    }
    let mut logits = head.cosines(embedding)?;
    logits[label] -= head.margin;
    for l in &mut logits {
        *l *= head.scale;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok(-(logits[label] - max) + z.ln())
}

/// Train the head on precomputed frozen-encoder embeddings (the encoder is
/// never touched). Returns the head and its final training accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_downstream(
    table: &EmbeddingTable,
    speaker_of: &IndexMap<String, String>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    margin: f64,
    scale: f64,
    seed: u64,
) -> Result<(DownstreamHead, f64)> {
    let mut classes: Vec<String> = speaker_of.values().cloned().collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(DeluluError::Contract("need at least 2 speakers".into()));
    }
    let dim = table.dim;
    let mut utts: Vec<(&str, usize)> = Vec::new();
    for (u, s) in speaker_of {
        table.get(u)?;
        utts.push((u.as_str(), classes.iter().position(|c| c == s).unwrap()));
    }
    // unit-normalized embeddings, as the protocol requires
    let mut embs: IndexMap<&str, Vec<f64>> = IndexMap::new();
    for (u, _) in &utts {
        let mut v = table.get(u)?.vector.clone();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(DeluluError::Numeric(format!("zero-norm embedding for {u}")));
        }
        for x in &mut v {
            *x /= n;
        }
        embs.insert(u, v);
    }

    let mut r = rng::stream(seed, 0x6473);
    let mut weights = Tensor::new(
        vec![classes.len(), dim],
        (0..classes.len() * dim).map(|_| r.gen_range(-0.1..0.1)).collect(),
    )?;
    let mut opt = OptimizerState::new(&[weights.numel()]);
    opt.weight_decay = 0.0; // decay would shrink rows; normalization makes it moot

    let mut order: Vec<usize> = (0..utts.len()).collect();
    for _epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        for chunk in order.chunks(batch_size) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * dim);
            let mut marg = vec![0.0; b * classes.len()];
            let mut labels = Vec::with_capacity(b);
            for (row, &i) in chunk.iter().enumerate() {
                let (u, c) = utts[i];
                x.extend_from_slice(&embs[u]);
                marg[row * classes.len() + c] = margin;
                labels.push(c);
            }
            let mut g = Graph::new();
            let wnode = g.input(weights.clone(), true);
            let xn = g.constant(Tensor::new(vec![b, dim], x)?);
            let wn = g.l2_normalize(wnode)?;
            let wt = g.transpose(wn)?;
            let cos = g.matmul(xn, wt)?;
            let mnode = g.constant(Tensor::new(vec![b, classes.len()], marg)?);
            let negm = g.scale(mnode, -1.0)?;
            let adj = g.add(cos, negm)?;
            let scaled = g.scale(adj, scale)?;
            let lp = g.log_softmax(scaled)?;
            let rows: Vec<usize> = (0..b).collect();
            let loss = g.nll_masked(lp, &labels, &rows)?;
            let grads = g.backward(loss)?;
            let grad = g.leaf_grad(&grads, wnode);
            adamw_step(&mut [&mut weights], &[grad], &mut opt, lr)?;
        }
    }

    let head = DownstreamHead {
        weights: weights.data().to_vec(),
        classes,
        dim,
        margin,
        scale,
    };
    let mut correct = 0usize;
    for (u, c) in &utts {
        if head.predict(&embs[u])? == *c {
            correct += 1;
        }
    }
    Ok((head, correct as f64 / utts.len() as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingStats {
    /// Mean cosine distance between utterances of the same speaker.
    pub intra_speaker: f64,
    /// Mean cosine distance between utterances of different speakers.
    pub inter_speaker: f64,
    /// inter / intra; higher means better speaker separation.
    pub ratio: f64,
    pub n_speakers: usize,
    pub n_utts: usize,
}

pub fn embedding_stats(table: &EmbeddingTable) -> Result<EmbeddingStats> {
    let mut by_spk: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (u, e) in &table.entries {
        by_spk.entry(&e.speaker_id).or_default().push(u);
    }
    if by_spk.len() < 2 || by_spk.values().any(|v| v.len() < 2) {
        return Err(DeluluError::Data(
            "embedding stats need >= 2 speakers with >= 2 utterances each".into(),
        ));
    }
    let dist = |a: &str, b: &str| -> Result<f64> {
        Ok(1.0 - cosine_score(&table.get(a)?.vector, &table.get(b)?.vector)?)
    };
    let (mut intra, mut n_intra) = (0.0, 0usize);
    let (mut inter, mut n_inter) = (0.0, 0usize);
    let utts: Vec<(&str, &str)> =
        table.entries.iter().map(|(u, e)| (u.as_str(), e.speaker_id.as_str())).collect();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            let d = dist(utts[i].0, utts[j].0)?;
            if utts[i].1 == utts[j].1 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    Ok(EmbeddingStats {
        intra_speaker: intra,
        inter_speaker: inter,
        ratio: if intra > 1e-15 { inter / intra } else { f64::INFINITY },
        n_speakers: by_spk.len(),
        n_utts: utts.len(),
    })
}

/// Top-2 PCA coordinates of the (centered) embeddings via power iteration
/// with deflation.
pub fn pca_2d(table: &EmbeddingTable) -> Result<Vec<(String, String, f64, f64)>> {
    let n = table.entries.len();
    if n < 3 {
        return Err(DeluluError::Data("PCA needs at least 3 embeddings".into()));
    }
    let d = table.dim;
    let mut mean = vec![0.0; d];
    for e in table.entries.values() {
        for (m, v) in mean.iter_mut().zip(&e.vector) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = table
        .entries
        .values()
        .map(|e| e.vector.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let cov_mul = |v: &[f64], deflate: Option<&[f64]>| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in &centered {
            let mut proj: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            if let Some(u) = deflate {
                let ru: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                let vu: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                proj -= ru * vu;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += proj * a / n as f64;
            }
        }
        out
    };
    let power = |deflate: Option<&[f64]>, seed: u64| -> Vec<f64> {
        let mut r = rng::stream(seed, 0x706361);
        let mut v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let mut w = cov_mul(&v, deflate);
            if let Some(u) = deflate {
                // project the deflated direction out to stop drift
                let wu: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, ui) in w.iter_mut().zip(u) {
                    *x -= wu * ui;
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            for x in &mut w {
                *x /= norm;
            }
            v = w;
        }
        v
    };
    let p1 = power(None, 1);
    let p2 = power(Some(&p1), 2);
    Ok(table
        .entries
        .iter()
        .zip(&centered)
        .map(|((u, e), row)| {
            let x: f64 = row.iter().zip(&p1).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(&p2).map(|(a, b)| a * b).sum();
            (u.clone(), e.speaker_id.clone(), x, y)
        })
        .collect())
}

/// CSV `utt_id,speaker_id,tag,x,y`; the tag column carries `tag_key`'s
/// value (empty when absent).
pub fn write_pca_csv(path: &Path, table: &EmbeddingTable, tag_key: &str) -> Result<()> {
    let coords = pca_2d(table)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "utt_id,speaker_id,tag,x,y")?;
    for (u, spk, x, y) in coords {
        let tag = table.get(&u)?.tags.get(tag_key).cloned().unwrap_or_default();
        writeln!(w, "{u},{spk},{tag},{x},{y}")?;
    }
    w.flush()?;
    Ok(())
}
