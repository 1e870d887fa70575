//! Mini-batch k-means over teacher frames, producing discrete pseudo-labels.
//!
//! k-means++ initialization, per-point 1/n mini-batch updates, multi-restart
//! selection by full-data inertia, plus an exact Lloyd step used as the
//! reference implementation in tests.

use crate::error::{DeluluError, Result};
use crate::rng;
use crate::teacher::{TeacherFrames, TeacherKind};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_restarts: usize,
    pub minibatch_size: usize,
    pub max_epochs: usize,
    /// Stop a restart when full-data inertia improves less than this,
    /// relative.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 256,
            n_restarts: 20,
            minibatch_size: 10_000,
            max_epochs: 50,
            rel_tol: 1e-6,
            seed: 0,
        }
    }
}

/// Desk-scale default vocabulary for a corpus of `n_speakers`.
pub fn default_k(n_speakers: usize) -> usize {
    (2 * n_speakers).min(256).max(2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major (k, dim).
    pub centroids: Vec<f64>,
    /// Per-centroid counts from the last full assignment.
    pub counts: Vec<u64>,
    /// Full-data inertia at the last full evaluation.
    pub inertia: f64,
    pub seed: u64,
}

impl KMeansModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index and squared distance; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = d2(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: first centroid uniform, each next proportional to
/// squared distance to its nearest chosen centroid.
pub fn kmeanspp_init(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    if points.len() % dim != 0 {
        return Err(DeluluError::Contract("frame buffer not divisible by dim".into()));
    }
    let mut distinct: Vec<&[f64]> = points.chunks_exact(dim).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < k {
        return Err(DeluluError::Data(format!(
            "k-means++ needs at least k={k} distinct points, found {}",
            distinct.len()
        )));
    }
    let mut r = rng::stream(seed, 0x6b70);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = r.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut dists: Vec<f64> =
        points.chunks_exact(dim).map(|p| d2(p, &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = dists.iter().sum();
        let mut target = r.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in dists.iter().enumerate() {
            target -= d;
            if target <= 0.0 {
                pick = i;
                break;
            }
        }
        let new = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(new);
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let d = d2(p, new);
            if d < dists[i] {
                dists[i] = d;
            }
        }
    }
    Ok(centroids)
}

/// Per-point streaming update: assign, bump count, move centroid by 1/n
/// toward the point. Points are applied strictly in batch order.
pub fn minibatch_update(model: &mut KMeansModel, batch: &[f64]) -> Result<()> {
    if batch.is_empty() {
        return Ok(());
    }
    if batch.len() % model.dim != 0 {
        return Err(DeluluError::Contract(format!(
            "batch length {} not divisible by dim {}",
            batch.len(),
            model.dim
        )));
    }
    for p in batch.chunks_exact(model.dim) {
        let (j, _) = nearest(p, &model.centroids, model.dim);
        model.counts[j] += 1;
        let lr = 1.0 / model.counts[j] as f64;
        let c = &mut model.centroids[j * model.dim..(j + 1) * model.dim];
        for (ci, &pi) in c.iter_mut().zip(p) {
            *ci += lr * (pi - *ci);
        }
    }
    Ok(())
}

/// Full-data inertia under the current centroids.
pub fn inertia(model: &KMeansModel, points: &[f64]) -> f64 {
    points.chunks_exact(model.dim).map(|p| nearest(p, &model.centroids, model.dim).1).sum()
}

/// Exact Lloyd step: assign every point, recompute means, reseed any empty
/// cluster to the point farthest from that cluster's old centroid. Returns
/// the inertia of the assignment (pre-update centroids).
pub fn full_lloyd_step(model: &mut KMeansModel, points: &[f64]) -> Result<f64> {
    let dim = model.dim;
    if points.len() % dim != 0 {
        return Err(DeluluError::Contract("frame buffer not divisible by dim".into()));
    }
    let n = points.len() / dim;
    let mut sums = vec![0.0; model.k * dim];
    let mut counts = vec![0u64; model.k];
    let mut total = 0.0;
    for p in points.chunks_exact(dim) {
        let (j, d) = nearest(p, &model.centroids, dim);
        total += d;
        counts[j] += 1;
        for (s, &pi) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
            *s += pi;
        }
    }
    for j in 0..model.k {
        if counts[j] > 0 {
            for (c, s) in model.centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..]) {
                *c = s / counts[j] as f64;
            }
        } else {
            // reseed to the point farthest from the empty cluster's centroid
            let old = model.centroids[j * dim..(j + 1) * dim].to_vec();
            let far = (0..n)
                .max_by(|&a, &b| {
                    d2(&points[a * dim..(a + 1) * dim], &old)
                        .partial_cmp(&d2(&points[b * dim..(b + 1) * dim], &old))
                        .unwrap()
                })
                .unwrap();
            model.centroids[j * dim..(j + 1) * dim]
                .copy_from_slice(&points[far * dim..(far + 1) * dim]);
            counts[j] = 0;
        }
    }
    model.counts = counts;
    model.inertia = total;
    Ok(total)
}

/// Multi-restart mini-batch fit; keeps the restart with the lowest
/// full-data inertia. Deterministic under `cfg.seed`.
pub fn fit(points: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<KMeansModel> {
    if cfg.k < 2 {
        return Err(DeluluError::Contract(format!("k must be >= 2, got {}", cfg.k)));
    }
    let n = points.len() / dim;
    let mut best: Option<KMeansModel> = None;
    for restart in 0..cfg.n_restarts.max(1) {
        let rseed = rng::derive(cfg.seed, restart as u64);
        let centroids = kmeanspp_init(points, dim, cfg.k, rseed)?;
        let mut model = KMeansModel {
            k: cfg.k,
            dim,
            centroids,
            counts: vec![0; cfg.k],
            inertia: f64::INFINITY,
            seed: cfg.seed,
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(rseed, 0x6f72);
        let mut prev = f64::INFINITY;
        for _epoch in 0..cfg.max_epochs {
            // deterministic shuffle per epoch
            for i in (1..order.len()).rev() {
                order.swap(i, r.gen_range(0..=i));
            }
            let mut batch = Vec::with_capacity(cfg.minibatch_size.min(n) * dim);
            for &i in &order {
                batch.extend_from_slice(&points[i * dim..(i + 1) * dim]);
                if batch.len() >= cfg.minibatch_size * dim {
                    minibatch_update(&mut model, &batch)?;
                    batch.clear();
                }
            }
            minibatch_update(&mut model, &batch)?;
            let cur = inertia(&model, points);
            if prev.is_finite() && (prev - cur) < cfg.rel_tol * prev.max(f64::MIN_POSITIVE) {
                prev = cur;
                break;
            }
            prev = cur;
        }
        model.inertia = prev;
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    let mut model = best.unwrap();
    // final full assignment pins counts and inertia to the full data
    let mut counts = vec![0u64; model.k];
    let mut total = 0.0;
    for p in points.chunks_exact(dim) {
        let (j, d) = nearest(p, &model.centroids, dim);
        counts[j] += 1;
        total += d;
    }
    model.counts = counts;
    model.inertia = total;
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: IndexMap<String, Vec<u16>>,
    pub k: usize,
    pub teacher_kind: TeacherKind,
    pub seed: u64,
}

impl PseudoLabelSet {
    pub fn validate(&self) -> Result<()> {
        for (utt, seq) in &self.labels {
            if let Some(&bad) = seq.iter().find(|&&l| (l as usize) >= self.k) {
                return Err(DeluluError::Contract(format!(
                    "utterance {utt} has label {bad} >= k={}",
                    self.k
                )));
            }
        }
        Ok(())
    }
}

/// Nearest-centroid label per frame; ties break to the lowest index.
pub fn assign_labels(model: &KMeansModel, frames: &[TeacherFrames]) -> Result<PseudoLabelSet> {
    if model.k > u16::MAX as usize + 1 {
        return Err(DeluluError::Contract(format!("k={} exceeds u16 label range", model.k)));
    }
    let mut labels = IndexMap::new();
    let mut kind = TeacherKind::Oracle;
    for tf in frames {
        if tf.frames.dim() != model.dim {
            return Err(DeluluError::Contract(format!(
                "teacher dim {} != model dim {} for utterance {}",
                tf.frames.dim(),
                model.dim,
                tf.utt_id
            )));
        }
        kind = tf.kind;
        let seq: Vec<u16> = (0..tf.frames.n_frames())
            .map(|t| nearest(tf.frames.frame(t), &model.centroids, model.dim).0 as u16)
            .collect();
        labels.insert(tf.utt_id.clone(), seq);
    }
    Ok(PseudoLabelSet { labels, k: model.k, teacher_kind: kind, seed: model.seed })
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len();
    let choose2 = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let mut cont: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cont.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let sum_ij: f64 = cont.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-15 {
        return 1.0; // both partitions trivial
    }
    (sum_ij - expected) / (max - expected)
}

const LABEL_MAGIC: &[u8; 4] = b"DLBL";
const LABEL_VERSION: u32 = 1;

fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct LabelIndex {
    teacher_kind: TeacherKind,
    seed: u64,
    offsets: BTreeMap<String, u64>,
}

/// Binary label file: magic "DLBL", version, k, n_utts; per utterance
/// utt_id len + bytes, T, then T u16 LE labels. Paired JSON index.
pub fn write_labels(path: &Path, set: &PseudoLabelSet) -> Result<()> {
    set.validate()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&LABEL_VERSION.to_le_bytes())?;
    w.write_all(&(set.k as u32).to_le_bytes())?;
    w.write_all(&(set.labels.len() as u32).to_le_bytes())?;
    let mut offsets = BTreeMap::new();
    let mut offset = 16u64;
    for (utt, seq) in &set.labels {
        offsets.insert(utt.clone(), offset);
        let id = utt.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(seq.len() as u32).to_le_bytes())?;
        for &l in seq {
            w.write_all(&l.to_le_bytes())?;
        }
        offset += 8 + id.len() as u64 + 2 * seq.len() as u64;
    }
    w.flush()?;
    let idx = LabelIndex { teacher_kind: set.teacher_kind, seed: set.seed, offsets };
    let f = std::fs::File::create(index_path(path))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &idx)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<PseudoLabelSet> {
    let truncated = || DeluluError::Data("truncated label file".into());
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != LABEL_MAGIC {
        return Err(DeluluError::Data(format!("bad label magic {magic:?}; expected \"DLBL\"")));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|_| truncated())?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != LABEL_VERSION {
        return Err(DeluluError::Data(format!("unsupported label version {version}")));
    }
    let k = read_u32(&mut r)? as usize;
    let n_utts = read_u32(&mut r)? as usize;
    let mut labels = IndexMap::new();
    for _ in 0..n_utts {
        let idlen = read_u32(&mut r)? as usize;
        let mut idb = vec![0u8; idlen];
        r.read_exact(&mut idb).map_err(|_| truncated())?;
        let utt = String::from_utf8(idb)
            .map_err(|_| DeluluError::Data("label utt_id is not UTF-8".into()))?;
        let t = read_u32(&mut r)? as usize;
        let mut lb = vec![0u8; 2 * t];
        r.read_exact(&mut lb).map_err(|_| truncated())?;
        let seq: Vec<u16> =
            lb.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
        labels.insert(utt, seq);
    }
    let raw = std::fs::read_to_string(index_path(path)).map_err(|e| {
        DeluluError::Data(format!("cannot read index {}: {e}", index_path(path).display()))
    })?;
    let idx: LabelIndex = serde_json::from_str(&raw)?;
    let set = PseudoLabelSet { labels, k, teacher_kind: idx.teacher_kind, seed: idx.seed };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blob(center: &[f64], n: usize, radius: f64, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 1);
        let mut out = Vec::with_capacity(n * center.len());
        for _ in 0..n {
            for &c in center {
                let g: f64 = StandardNormal.sample(&mut r);
                out.push(c + radius * g);
            }
        }
        out
    }

    #[test]
    fn kmeanspp_all_distinct_points_become_centroids() {
        let pts = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
        let cents = kmeanspp_init(&pts, 2, 4, 9).unwrap();
        let model =
            KMeansModel { k: 4, dim: 2, centroids: cents, counts: vec![0; 4], inertia: 0.0, seed: 9 };
        assert_eq!(inertia(&model, &pts), 0.0);
    }

    #[test]
    fn kmeanspp_too_few_distinct_points_errors() {
        let pts = vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0]; // 2 distinct 2-d points
        assert!(kmeanspp_init(&pts, 2, 3, 0).is_err());
    }

    #[test]
    fn kmeanspp_separated_blobs_get_one_seed_each() {
        // blob radius 1, separation 100x
        let mut pts = blob(&[0.0, 0.0], 50, 1.0, 10);
        pts.extend(blob(&[100.0, 0.0], 50, 1.0, 11));
        let mut hits = 0;
        for seed in 0..100 {
            let c = kmeanspp_init(&pts, 2, 2, seed).unwrap();
            let first_left = c[0] < 50.0;
            let second_left = c[2] < 50.0;
            if first_left != second_left {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 runs seeded both blobs");
    }

    #[test]
    fn kmeanspp_deterministic_under_seed() {
        let pts = blob(&[0.0, 0.0, 0.0], 40, 1.0, 3);
        assert_eq!(kmeanspp_init(&pts, 3, 4, 7).unwrap(), kmeanspp_init(&pts, 3, 4, 7).unwrap());
    }

    #[test]
    fn single_centroid_tracks_running_mean_exactly() {
        let pts: Vec<f64> = vec![2.0, 4.0, 9.0, 1.0, 4.0];
        let mut model = KMeansModel {
            k: 1,
            dim: 1,
            centroids: vec![0.0],
            counts: vec![0],
            inertia: 0.0,
            seed: 0,
        };
        minibatch_update(&mut model, &pts).unwrap();
        let mean = pts.iter().sum::<f64>() / pts.len() as f64;
        assert!((model.centroids[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn minibatch_noop_on_empty_and_fixed_point_on_centroids() {
        let mut model = KMeansModel {
            k: 2,
            dim: 1,
            centroids: vec![0.0, 10.0],
            counts: vec![0, 0],
            inertia: 0.0,
            seed: 0,
        };
        minibatch_update(&mut model, &[]).unwrap();
        assert_eq!(model.centroids, vec![0.0, 10.0]);
        minibatch_update(&mut model, &[0.0, 10.0]).unwrap();
        assert_eq!(model.centroids, vec![0.0, 10.0]);
    }

    #[test]
    fn repeated_passes_separate_three_blobs_perfectly() {
        let mut pts = blob(&[0.0, 0.0], 60, 0.3, 20);
        pts.extend(blob(&[10.0, 0.0], 60, 0.3, 21));
        pts.extend(blob(&[0.0, 10.0], 60, 0.3, 22));
        let truth: Vec<usize> = (0..180).map(|i| i / 60).collect();
        let model = fit(&pts, 2, &KMeansConfig { k: 3, n_restarts: 5, ..Default::default() })
            .unwrap();
        let got: Vec<usize> =
            pts.chunks_exact(2).map(|p| nearest(p, &model.centroids, 2).0).collect();
        assert!(adjusted_rand_index(&truth, &got) >= 0.999);
    }

    #[test]
    fn lloyd_step_hand_example() {
        let pts = vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0];
        let mut model = KMeansModel {
            k: 2,
            dim: 2,
            centroids: vec![0.0, 0.0, 10.0, 1.0],
            counts: vec![0, 0],
            inertia: 0.0,
            seed: 0,
        };
        full_lloyd_step(&mut model, &pts).unwrap();
        assert_eq!(model.centroids, vec![0.0, 0.5, 10.0, 0.5]);
        let i = full_lloyd_step(&mut model, &pts).unwrap();
        assert!((i - 1.0).abs() < 1e-12, "inertia {i}");
        // converged: another step leaves everything unchanged
        let i2 = full_lloyd_step(&mut model, &pts).unwrap();
        assert_eq!(i2, i);
        assert_eq!(model.centroids, vec![0.0, 0.5, 10.0, 0.5]);
    }

    #[test]
    fn lloyd_inertia_nonincreasing_on_random_data() {
        let pts = blob(&[0.0; 4], 200, 3.0, 30);
        let cents = kmeanspp_init(&pts, 4, 6, 1).unwrap();
        let mut model =
            KMeansModel { k: 6, dim: 4, centroids: cents, counts: vec![0; 6], inertia: 0.0, seed: 1 };
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let i = full_lloyd_step(&mut model, &pts).unwrap();
            assert!(i <= prev + 1e-9, "inertia rose: {prev} -> {i}");
            prev = i;
        }
    }

    #[test]
    fn more_restarts_never_hurt() {
        let mut pts = blob(&[0.0, 0.0], 40, 0.5, 40);
        pts.extend(blob(&[6.0, 0.0], 40, 0.5, 41));
        pts.extend(blob(&[0.0, 6.0], 3, 0.5, 42)); // small blob: easy to miss
        let one = fit(&pts, 2, &KMeansConfig { k: 3, n_restarts: 1, ..Default::default() }).unwrap();
        let twenty =
            fit(&pts, 2, &KMeansConfig { k: 3, n_restarts: 20, ..Default::default() }).unwrap();
        assert!(twenty.inertia <= one.inertia + 1e-9);
    }

    #[test]
    fn fit_is_deterministic() {
        let pts = blob(&[1.0, 2.0, 3.0], 100, 1.0, 50);
        let cfg = KMeansConfig { k: 4, n_restarts: 3, ..Default::default() };
        let a = fit(&pts, 3, &cfg).unwrap();
        let b = fit(&pts, 3, &cfg).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn assign_labels_tie_breaks_low_and_matches_centroids() {
        use crate::encoder::FrameSequence;
        use crate::numerics::Tensor;
        let model = KMeansModel {
            k: 6,
            dim: 1,
            centroids: vec![0.0, 1.0, 2.0, 3.0, 4.0, 2.0], // 5 duplicates 2
            counts: vec![0; 6],
            inertia: 0.0,
            seed: 0,
        };
        let tf = TeacherFrames {
            frames: FrameSequence::new(Tensor::new(vec![2, 1], vec![3.0, 2.0]).unwrap(), 16.0)
                .unwrap(),
            kind: TeacherKind::Oracle,
            utt_id: "u".into(),
        };
        let set = assign_labels(&model, &[tf]).unwrap();
        // frame equal to centroid 3 -> 3; equidistant to 2 and 5 -> 2
        assert_eq!(set.labels["u"], vec![3, 2]);
    }

    #[test]
    fn oracle_frames_cluster_to_speakers() {
        use crate::audio::{generate_speakers, synth_utterance, SpeakerGenConfig};
        use crate::teacher::{teacher_embed, TeacherConfig};
        let spks = generate_speakers(4, 60, &SpeakerGenConfig::default());
        let tcfg = TeacherConfig::default();
        let mut frames = Vec::new();
        let mut truth = Vec::new();
        let mut tfs = Vec::new();
        for (i, spk) in spks.iter().enumerate() {
            for u in 0..2 {
                let w = synth_utterance(spk, 0.55, (i * 10 + u) as u64).unwrap();
                let tf = teacher_embed(&w, &tcfg, Some(spk), &format!("s{i}u{u}")).unwrap();
                for t in 0..tf.frames.n_frames() {
                    frames.extend_from_slice(tf.frames.frame(t));
                    truth.push(i);
                }
                tfs.push(tf);
            }
        }
        let cfg = KMeansConfig { k: 4, n_restarts: 5, seed: 2, ..Default::default() };
        let model = fit(&frames, tcfg.embed_dim, &cfg).unwrap();
        let got: Vec<usize> = frames
            .chunks_exact(tcfg.embed_dim)
            .map(|p| nearest(p, &model.centroids, tcfg.embed_dim).0)
            .collect();
        assert!(adjusted_rand_index(&truth, &got) >= 0.99);

        // per-speaker modal label frequency >= 0.9 when k == n_speakers
        let set = assign_labels(&model, &tfs).unwrap();
        for (i, _) in spks.iter().enumerate() {
            let mut counts = vec![0usize; cfg.k];
            let mut total = 0usize;
            for u in 0..2 {
                for &l in &set.labels[&format!("s{i}u{u}")] {
                    counts[l as usize] += 1;
                    total += 1;
                }
            }
            let modal = *counts.iter().max().unwrap();
            assert!(
                modal as f64 / total as f64 >= 0.9,
                "speaker {i} modal frequency {}",
                modal as f64 / total as f64
            );
        }
    }

    #[test]
    fn ari_hand_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let a = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!((a - (-0.5)).abs() < 1e-12, "{a}");
    }

    #[test]
    fn label_file_round_trip() {
        let mut labels = IndexMap::new();
        labels.insert("utt0".to_string(), vec![0u16, 1, 2, 1]);
        labels.insert("utt1".to_string(), vec![3u16; 63]);
        let set = PseudoLabelSet { labels, k: 4, teacher_kind: TeacherKind::Spectral, seed: 77 };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.bin");
        write_labels(&p, &set).unwrap();
        let back = read_labels(&p).unwrap();
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.k, 4);
        assert_eq!(back.teacher_kind, TeacherKind::Spectral);
        assert_eq!(back.seed, 77);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut labels = IndexMap::new();
        labels.insert("u".to_string(), vec![5u16]);
        let set = PseudoLabelSet { labels, k: 4, teacher_kind: TeacherKind::Oracle, seed: 0 };
        let dir = tempfile::tempdir().unwrap();
        assert!(write_labels(&dir.path().join("l.bin"), &set).is_err());
    }
}
