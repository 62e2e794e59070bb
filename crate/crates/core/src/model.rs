//! Shared domain types: labels, samples, scores, confusion counts and the
//! threshold/validation-set state every other module works against.
//!
//! Anomalous is the positive class throughout. Scores are raw and oriented so
//! that higher means more anomalous; they are never normalised to `[0, 1]`.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Normal,
    Anomalous,
}

impl LabelKind {
    pub fn is_anomalous(self) -> bool {
        matches!(self, LabelKind::Anomalous)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("score for sample {0} is not finite")]
    NonFiniteScore(String),
    #[error("validation set is unbalanced: {normal} normal vs {anomalous} anomalous")]
    Unbalanced { normal: usize, anomalous: usize },
    #[error("duplicate sample id {0} in validation set")]
    DuplicateId(String),
    #[error("validation entry {id} has dimension {got}, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
}

/// One scoring unit from the stream.
///
/// `slice_index` is `-1` for the warm-up stream and `0..S` for training slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub seq: u64,
    pub slice_index: i64,
    pub features: Vec<f64>,
    pub ground_truth: Option<LabelKind>,
}

impl Sample {
    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    sample: Sample,
    score: f64,
}

impl ScoredSample {
    pub fn new(sample: Sample, score: f64) -> Result<Self, ModelError> {
        if !score.is_finite() {
            return Err(ModelError::NonFiniteScore(sample.id));
        }
        Ok(Self { sample, score })
    }

    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn into_sample(self) -> Sample {
        self.sample
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sample_id: String,
    pub label: LabelKind,
    pub threshold_used: f64,
}

/// Inclusive decision rule: a score exactly at the threshold is anomalous.
#[inline]
pub fn classify(score: f64, theta: f64) -> LabelKind {
    if score >= theta {
        LabelKind::Anomalous
    } else {
        LabelKind::Normal
    }
}

pub fn pseudo_label(s: &ScoredSample, theta: f64) -> PseudoLabel {
    PseudoLabel {
        sample_id: s.sample.id.clone(),
        label: classify(s.score, theta),
        threshold_used: theta,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub const fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    /// Records one prediction against its ground truth.
    pub fn record(&mut self, predicted: LabelKind, truth: LabelKind) {
        match (predicted, truth) {
            (LabelKind::Anomalous, LabelKind::Anomalous) => self.tp += 1,
            (LabelKind::Anomalous, LabelKind::Normal) => self.fp += 1,
            (LabelKind::Normal, LabelKind::Normal) => self.tn += 1,
            (LabelKind::Normal, LabelKind::Anomalous) => self.fn_ += 1,
        }
    }

    /// Counts `(score, truth)` pairs classified at `theta`.
    pub fn at_threshold<I>(data: I, theta: f64) -> Self
    where
        I: IntoIterator<Item = (f64, LabelKind)>,
    {
        let mut c = Self::default();
        for (score, truth) in data {
            c.record(classify(score, theta), truth);
        }
        c
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            tn: self.tn + rhs.tn,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl core::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn accumulate(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts {
    a + b
}

/// Operating threshold plus the error rates it achieves on the validation set
/// as scored by model version `scorer_version`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub theta: f64,
    pub fpr_at_theta: f64,
    pub fnr_at_theta: f64,
    pub calibration_round: u32,
    pub scorer_version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ConfirmedTp,
    ConfirmedFp,
    SampledPseudoNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub sample_id: String,
    pub features: Vec<f64>,
    pub label: LabelKind,
    pub provenance: Provenance,
}

/// Human-curated labelled set with exactly as many normal as anomalous
/// entries. Membership is fixed once built.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSet {
    entries: Vec<ValidationEntry>,
}

impl ValidationSet {
    pub fn new(entries: Vec<ValidationEntry>) -> Result<Self, ModelError> {
        let anomalous = entries.iter().filter(|e| e.label.is_anomalous()).count();
        let normal = entries.len() - anomalous;
        if normal != anomalous {
            return Err(ModelError::Unbalanced { normal, anomalous });
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(ModelError::DuplicateId(e.sample_id.clone()));
            }
        }
        if let Some(first) = entries.first() {
            let expected = first.features.len();
            if let Some(bad) = entries.iter().find(|e| e.features.len() != expected) {
                return Err(ModelError::DimensionMismatch {
                    id: bad.sample_id.clone(),
                    expected,
                    got: bad.features.len(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ValidationEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries per class.
    pub fn pairs(&self) -> usize {
        self.entries.len() / 2
    }
}

impl<'de> Deserialize<'de> for ValidationSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            entries: Vec<ValidationEntry>,
        }
        let raw = Raw::deserialize(d)?;
        ValidationSet::new(raw.entries).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Methodology {
    /// Train on every sample of the slice.
    Continual,
    /// Train only on pseudo-normal samples.
    PseudoContinual,
    /// Pseudo-normals plus every human-confirmed false positive.
    ActiveLearning,
    /// Like active learning, but only positives inside the review band are
    /// sent to a human.
    AlLight,
}

impl Methodology {
    pub const ALL: [Methodology; 4] = [
        Methodology::Continual,
        Methodology::PseudoContinual,
        Methodology::ActiveLearning,
        Methodology::AlLight,
    ];

    pub fn requests_annotation(self) -> bool {
        matches!(self, Methodology::ActiveLearning | Methodology::AlLight)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Methodology::Continual => "continual",
            Methodology::PseudoContinual => "pseudo_continual",
            Methodology::ActiveLearning => "active_learning",
            Methodology::AlLight => "al_light",
        }
    }
}

impl core::fmt::Display for Methodology {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Methodology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continual" => Ok(Methodology::Continual),
            "pseudo" | "pseudo_continual" => Ok(Methodology::PseudoContinual),
            "active" | "active_learning" => Ok(Methodology::ActiveLearning),
            "light" | "al_light" => Ok(Methodology::AlLight),
            other => Err(alloc::format!(
                "unknown methodology `{other}` (expected continual, pseudo, active or light)"
            )),
        }
    }
}
