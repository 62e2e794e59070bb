//! Run configuration: one JSON document, with command-line flags layered on
//! top (flag > file > default).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vigil_core::pipeline::{BandConfig, ConfigIssue, PipelineConfig, ThresholdPolicy, DEFAULT_TARGET_PAIRS};
use vigil_core::scorer::{ScorerConfig, DEFAULT_KNN_CAPACITY, DEFAULT_KNN_K, DEFAULT_VARIANCE_FLOOR};
use vigil_core::{Methodology, RefitPolicy, ScorerKind};

use crate::io::{read_json, DataError};

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_TIMEOUT_SECS: u64 = 600;
pub const DEFAULT_LEASE_SECS: u64 = 120;
pub const PORT_ENV: &str = "VIGIL_PORT";

/// The built-in port, unless `VIGIL_PORT` names another one.
pub fn default_port() -> u16 {
    std::env::var(PORT_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_PORT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSettings {
    pub kind: ScorerKind,
    pub variance_floor: f64,
    pub knn_k: usize,
    pub knn_capacity: usize,
    /// Score file backing a replay scorer.
    pub scores: Option<PathBuf>,
}

impl Default for ScorerSettings {
    fn default() -> Self {
        Self {
            kind: ScorerKind::DiagGaussian,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            knn_k: DEFAULT_KNN_K,
            knn_capacity: DEFAULT_KNN_CAPACITY,
            scores: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorMode {
    /// Ground-truth oracle with optional label noise.
    #[default]
    Oracle,
    /// Human verdicts over the HTTP queue.
    Server,
    /// Verdicts replayed from a log file.
    Scripted,
}

impl std::str::FromStr for AnnotatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "server" => Ok(Self::Server),
            "scripted" => Ok(Self::Scripted),
            other => Err(format!(
                "unknown annotator {other:?} (expected oracle, server or scripted)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorSettings {
    pub mode: AnnotatorMode,
    pub flip_probability: f64,
    /// Verdict log for scripted mode.
    pub verdicts: Option<PathBuf>,
    pub port: u16,
    /// How long a barrier may wait for verdicts before the run checkpoints.
    pub timeout_secs: u64,
    pub lease_secs: u64,
    pub poll_ms: u64,
}

impl Default for AnnotatorSettings {
    fn default() -> Self {
        Self {
            mode: AnnotatorMode::Oracle,
            flip_probability: 0.0,
            verdicts: None,
            port: default_port(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            lease_secs: DEFAULT_LEASE_SECS,
            poll_ms: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub oracle: u64,
    pub sampling: u64,
    /// Seeds the k-NN exemplar reservoir.
    pub scorer: u64,
}

fn default_methodology() -> Methodology {
    Methodology::ActiveLearning
}
fn default_target_pairs() -> usize {
    DEFAULT_TARGET_PAIRS
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path to the dataset's `manifest.json`.
    pub dataset: PathBuf,
    #[serde(default = "default_methodology")]
    pub methodology: Methodology,
    #[serde(default)]
    pub scorer: ScorerSettings,
    #[serde(default)]
    pub refit: RefitPolicy,
    #[serde(default)]
    pub annotator: AnnotatorSettings,
    #[serde(default)]
    pub band: BandConfig,
    #[serde(default = "default_target_pairs")]
    pub target_pairs: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub threshold_policy: ThresholdPolicy,
    #[serde(default = "default_true")]
    pub train: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            methodology: default_methodology(),
            scorer: ScorerSettings::default(),
            refit: RefitPolicy::default(),
            annotator: AnnotatorSettings::default(),
            band: BandConfig::default(),
            target_pairs: DEFAULT_TARGET_PAIRS,
            seeds: Seeds::default(),
            threshold_policy: ThresholdPolicy::default(),
            train: true,
            output_dir: output_dir.into(),
        }
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        if let Some(p) = self.scorer.scores.as_mut() {
            fix(p);
        }
        if let Some(p) = self.annotator.verdicts.as_mut() {
            fix(p);
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            methodology: self.methodology,
            refit: self.refit,
            band: self.band,
            target_pairs: self.target_pairs,
            sampling_seed: self.seeds.sampling,
            threshold_policy: self.threshold_policy,
            train: self.train,
        }
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            variance_floor: self.scorer.variance_floor,
            knn_k: self.scorer.knn_k,
            knn_capacity: self.scorer.knn_capacity,
            seed: self.seeds.scorer,
        }
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = self.pipeline_config().issues();
        let s = &self.scorer;
        if !(s.variance_floor.is_finite() && s.variance_floor > 0.0) {
            out.push(ConfigIssue::new("scorer.variance_floor", "must be finite and positive"));
        }
        if s.knn_k == 0 {
            out.push(ConfigIssue::new("scorer.knn_k", "must be positive"));
        }
        if s.knn_capacity < s.knn_k {
            out.push(ConfigIssue::new("scorer.knn_capacity", "must be at least knn_k"));
        }
        if s.kind == ScorerKind::Replay {
            if s.scores.is_none() {
                out.push(ConfigIssue::new("scorer.scores", "replay scorer needs a score file"));
            }
            if self.train {
                out.push(ConfigIssue::new(
                    "train",
                    "replay scorers cannot be refit; set train to false",
                ));
            }
        }
        let a = &self.annotator;
        if !(0.0..=0.5).contains(&a.flip_probability) {
            out.push(ConfigIssue::new("annotator.flip_probability", "must lie in [0, 0.5]"));
        }
        if a.mode == AnnotatorMode::Scripted && a.verdicts.is_none() {
            out.push(ConfigIssue::new(
                "annotator.verdicts",
                "scripted annotator needs a verdict log",
            ));
        }
        if a.poll_ms == 0 {
            out.push(ConfigIssue::new("annotator.poll_ms", "must be positive"));
        }
        if a.lease_secs == 0 {
            out.push(ConfigIssue::new("annotator.lease_secs", "must be positive"));
        }
        out
    }
}
