//! One JSON config governing a run. A single global seed deterministically
//! derives every module seed; module seed fields may still be set
//! explicitly in the file for surgical overrides.

use crate::cluster::KMeansConfig;
use crate::encoder::EncoderConfig;
use crate::error::{DeluluError, Result};
use crate::rng;
use crate::teacher::TeacherConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub knn_k: usize,
    pub n_folds: usize,
    /// L2-normalize utterance embeddings before scoring.
    pub normalize: bool,
    /// Subgroups with fewer trials than this are flagged unreliable.
    pub min_subgroup_trials: usize,
    /// AM-Softmax head hyperparameters for the downstream protocol.
    pub margin: f64,
    pub scale: f64,
    pub head_epochs: usize,
    pub head_batch: usize,
    pub head_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_trials: 400,
            knn_k: 5,
            n_folds: 5,
            normalize: true,
            min_subgroup_trials: 20,
            margin: 0.2,
            scale: 30.0,
            head_epochs: 30,
            head_batch: 32,
            head_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub manifest: PathBuf,
    /// Separate held-out manifest for verification trials; falls back to
    /// `manifest` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_manifest: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub teacher: TeacherConfig,
    pub cluster: KMeansConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            workdir: PathBuf::from("work"),
            manifest: PathBuf::from("data/manifest.jsonl"),
            eval_manifest: None,
            encoder: EncoderConfig::default(),
            teacher: TeacherConfig::default(),
            cluster: KMeansConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

impl RunConfig {
    /// Re-derive every module seed from the global one.
    pub fn propagate_seed(&mut self) {
        self.cluster.seed = rng::derive_str(self.seed, "cluster");
        self.train.seed = rng::derive_str(self.seed, "train");
        self.teacher.projection_seed = rng::derive_str(self.seed, "teacher-projection");
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.propagate_seed();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.teacher.validate()?;
        if (self.teacher.frame_period_ms - self.encoder.frame_period_ms()).abs() > 1e-9 {
            return Err(DeluluError::Contract(format!(
                "teacher frame period {} ms != encoder frame period {} ms",
                self.teacher.frame_period_ms,
                self.encoder.frame_period_ms()
            )));
        }
        if self.eval.n_folds < 2 {
            return Err(DeluluError::Contract("eval.n_folds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn eval_manifest_path(&self) -> &Path {
        self.eval_manifest.as_deref().unwrap_or(&self.manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| DeluluError::Data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}
