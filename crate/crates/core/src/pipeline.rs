//! The two-phase adaptation loop.
//!
//! **Warm-up.** A source-domain scorer pseudo-labels the warm-up stream at its
//! source threshold. Pseudo-positives go to an annotator; confirmed true
//! positives become the anomalous half of a validation set, and confirmed
//! false positives topped up with sampled pseudo-normals become the normal
//! half, in exactly equal numbers. The EER threshold on that set is the first
//! operating threshold.
//!
//! **Slices.** Each incoming slice is processed in a fixed order:
//!
//! 1. score with the current model;
//! 2. pseudo-label at the current threshold;
//! 3. record prequential confusion against ground truth (before any training);
//! 4. route pseudo-positives to review according to the methodology;
//! 5. build the training set K;
//! 6. refit the scorer;
//! 7. rescore the validation set and recompute the EER threshold;
//! 8. push the slice's maximum score into the AL-Light band window.
//!
//! Steps 1-4 happen in [`Pipeline::begin_slice`], which hands back the review
//! items; steps 5-8 happen in [`Pipeline::finish_slice`] once verdicts are
//! available. Between the two calls nothing in the pipeline changes, which is
//! what lets a caller park at the annotation barrier and resume later.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    filter_requests, AnnotationError, AnnotationRequest, AnnotationVerdict, Annotator, BandMode, ReviewItem,
    RollingBandState, Verdict, DEFAULT_BAND_WINDOW,
};
use crate::metrics::{ebi, eer_operating_point, rates, MetricsError};
use crate::model::{
    classify, pseudo_label, ConfusionCounts, LabelKind, Methodology, ModelError, Provenance, PseudoLabel, Sample,
    ScoredSample, ThresholdState, ValidationEntry, ValidationSet,
};
use crate::scorer::{RefitPolicy, ScorerError, ScorerKind, ScorerModel, TrainingBuffer};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TARGET_PAIRS: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("{i}")).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("warm-up stream is empty")]
    EmptyWarmStream,
    #[error("no anomalies were confirmed during warm-up; the threshold cannot be calibrated")]
    InsufficientAnomalies,
    #[error("no normal samples available for the validation set")]
    InsufficientNormals,
    #[error("no verdict for reviewed request {0}")]
    MissingVerdict(String),
    #[error("verdict for unknown request {0}")]
    UnknownRequest(String),
    #[error("conflicting verdicts for request {0}")]
    ConflictingVerdict(String),
    #[error("pseudo-labels do not line up with the slice")]
    PseudoLabelMismatch,
    #[error("invalid configuration: {}", join_issues(.0))]
    InvalidConfig(Vec<ConfigIssue>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Recompute the EER threshold on the validation set after warm-up and
    /// after every slice.
    #[default]
    Recalibrate,
    /// Keep the source threshold for the whole run (ablation). Rates are
    /// still measured on the validation set.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandConfig {
    pub mode: BandMode,
    pub window: usize,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            mode: BandMode::WindowPercentile,
            window: DEFAULT_BAND_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub methodology: Methodology,
    pub refit: RefitPolicy,
    pub band: BandConfig,
    /// Validation-set entries per class.
    pub target_pairs: usize,
    /// Seeds validation-set sampling during warm-up.
    pub sampling_seed: u64,
    pub threshold_policy: ThresholdPolicy,
    /// When false the scorer is never refit (pure evaluation).
    pub train: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            methodology: Methodology::ActiveLearning,
            refit: RefitPolicy::default(),
            band: BandConfig::default(),
            target_pairs: DEFAULT_TARGET_PAIRS,
            sampling_seed: 0,
            threshold_policy: ThresholdPolicy::Recalibrate,
            train: true,
        }
    }
}

impl PipelineConfig {
    pub fn with_methodology(mut self, methodology: Methodology) -> Self {
        self.methodology = methodology;
        self
    }

    /// Every problem found, with field paths relative to this config.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.refit.blend_alpha) {
            out.push(ConfigIssue::new("refit.blend_alpha", "must lie in [0, 1]"));
        }
        if self.refit.buffer_capacity == 0 {
            out.push(ConfigIssue::new("refit.buffer_capacity", "must be positive"));
        }
        if self.band.window == 0 {
            out.push(ConfigIssue::new("band.window", "must be positive"));
        }
        if self.target_pairs == 0 {
            out.push(ConfigIssue::new("target_pairs", "must be positive"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::InvalidConfig(issues))
        }
    }

    /// Extra checks that depend on the scorer in use.
    pub fn validate_for(&self, model: &ScorerModel) -> Result<(), PipelineError> {
        let mut issues = self.issues();
        if self.train && model.kind() == ScorerKind::Replay {
            issues.push(ConfigIssue::new(
                "train",
                "replay scorers cannot be refit; disable training",
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::InvalidConfig(issues))
        }
    }
}

fn score_all(model: &ScorerModel, samples: &[Sample]) -> Result<Vec<ScoredSample>, PipelineError> {
    samples
        .iter()
        .map(|s| {
            let score = model.score(s)?;
            Ok(ScoredSample::new(s.clone(), score)?)
        })
        .collect()
}

/// Checks a verdict list against the requests it should answer. Identical
/// repeats are tolerated; anything else unexpected is an error.
fn resolve_verdicts<'a>(
    requests: impl IntoIterator<Item = &'a AnnotationRequest>,
    verdicts: &[AnnotationVerdict],
) -> Result<BTreeMap<String, Verdict>, PipelineError> {
    let expected: BTreeSet<&str> = requests.into_iter().map(|r| r.request_id.as_str()).collect();
    let mut out: BTreeMap<String, Verdict> = BTreeMap::new();
    for v in verdicts {
        if !expected.contains(v.request_id.as_str()) {
            return Err(PipelineError::UnknownRequest(v.request_id.clone()));
        }
        match out.get(&v.request_id) {
            Some(prev) if *prev != v.verdict => return Err(PipelineError::ConflictingVerdict(v.request_id.clone())),
            _ => {
                out.insert(v.request_id.clone(), v.verdict);
            }
        }
    }
    if let Some(missing) = expected.iter().find(|id| !out.contains_key(**id)) {
        return Err(PipelineError::MissingVerdict((*missing).into()));
    }
    Ok(out)
}

fn make_request(s: &ScoredSample, slice_index: i64, issued_at: u64) -> ReviewItem {
    let request_id = if slice_index < 0 {
        format!("req-w-{issued_at}")
    } else {
        format!("req-{slice_index}-{issued_at}")
    };
    ReviewItem {
        request: AnnotationRequest {
            request_id,
            sample_id: s.sample().id.clone(),
            score: s.score(),
            slice_index,
            features: s.sample().features.clone(),
            issued_at,
        },
        truth: s.sample().ground_truth,
    }
}

fn validation_scores(model: &ScorerModel, vs: &ValidationSet) -> Result<Vec<(f64, LabelKind)>, PipelineError> {
    vs.entries()
        .iter()
        .map(|e| Ok((model.score_parts(&e.sample_id, &e.features)?, e.label)))
        .collect()
}

/// EER threshold on the validation set as scored by `model`.
pub fn calibrate(model: &ScorerModel, vs: &ValidationSet, round: u32) -> Result<ThresholdState, PipelineError> {
    let scored = validation_scores(model, vs)?;
    Ok(eer_operating_point(&scored)?.into_state(round, model.version))
}

/// Rates achieved by a fixed `theta` on the validation set as scored by `model`.
pub fn measure_at(
    model: &ScorerModel,
    vs: &ValidationSet,
    theta: f64,
    round: u32,
) -> Result<ThresholdState, PipelineError> {
    let scored = validation_scores(model, vs)?;
    let c = ConfusionCounts::at_threshold(scored, theta);
    let (fpr, fnr) = rates(&c)?;
    Ok(ThresholdState {
        theta,
        fpr_at_theta: fpr,
        fnr_at_theta: fnr,
        calibration_round: round,
        scorer_version: model.version,
    })
}

/// Confusion of `slice` thresholded at `theta` under `model`, with no side
/// effects. Samples without ground truth are not counted.
pub fn evaluate_slice(model: &ScorerModel, theta: f64, slice: &[Sample]) -> Result<ConfusionCounts, PipelineError> {
    let mut c = ConfusionCounts::default();
    for s in slice {
        let score = model.score(s)?;
        if let Some(truth) = s.ground_truth {
            c.record(classify(score, theta), truth);
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupSummary {
    pub stream_size: u64,
    pub requests: u64,
    pub confirmed_tp: u64,
    pub confirmed_fp: u64,
    pub validation_pairs: u64,
}

/// The scored warm-up stream and the review items it produced, waiting for
/// verdicts.
#[derive(Debug, Clone)]
pub struct WarmupPlan {
    scored: Vec<ScoredSample>,
    items: Vec<ReviewItem>,
    source_threshold: f64,
    max_score: f64,
    next_issue: u64,
}

impl WarmupPlan {
    pub fn new(
        stream: &[Sample],
        model: &ScorerModel,
        source_threshold: f64,
        first_issue: u64,
    ) -> Result<Self, PipelineError> {
        if stream.is_empty() {
            return Err(PipelineError::EmptyWarmStream);
        }
        let scored = score_all(model, stream)?;
        let mut next_issue = first_issue;
        let mut items = Vec::new();
        for s in &scored {
            if s.score() >= source_threshold {
                items.push(make_request(s, -1, next_issue));
                next_issue += 1;
            }
        }
        let max_score = scored.iter().map(ScoredSample::score).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            scored,
            items,
            source_threshold,
            max_score,
            next_issue,
        })
    }

    pub fn review_items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn source_threshold(&self) -> f64 {
        self.source_threshold
    }

    pub fn next_issue(&self) -> u64 {
        self.next_issue
    }

    /// Builds the balanced validation set from the verdicts.
    ///
    /// With `n = min(confirmed TPs, target_pairs, available normals)`, the
    /// anomalous side is `n` confirmed TPs; the normal side is confirmed FPs
    /// first and then sampled pseudo-normals. Subsets are drawn with the seeded
    /// sampler and kept in stream order.
    pub fn build_validation(
        &self,
        verdicts: &[AnnotationVerdict],
        target_pairs: usize,
        seed: u64,
    ) -> Result<(ValidationSet, WarmupSummary), PipelineError> {
        let resolved = resolve_verdicts(self.items.iter().map(|i| &i.request), verdicts)?;
        let by_sample: BTreeMap<&str, Verdict> = self
            .items
            .iter()
            .map(|i| (i.request.sample_id.as_str(), resolved[&i.request.request_id]))
            .collect();

        let mut tps = Vec::new();
        let mut fps = Vec::new();
        let mut pseudo_normals = Vec::new();
        for s in &self.scored {
            match by_sample.get(s.sample().id.as_str()) {
                Some(Verdict::Tp) => tps.push(s),
                Some(Verdict::Fp) => fps.push(s),
                None => pseudo_normals.push(s),
            }
        }
        if tps.is_empty() {
            return Err(PipelineError::InsufficientAnomalies);
        }
        let available_normals = fps.len() + pseudo_normals.len();
        if available_normals == 0 {
            return Err(PipelineError::InsufficientNormals);
        }
        let n = tps.len().min(target_pairs).min(available_normals);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |pool: &[&ScoredSample], k: usize| -> Vec<usize> {
            if k >= pool.len() {
                return (0..pool.len()).collect();
            }
            let mut idx = index::sample(&mut rng, pool.len(), k).into_vec();
            idx.sort_unstable();
            idx
        };

        let entry = |s: &ScoredSample, label, provenance| ValidationEntry {
            sample_id: s.sample().id.clone(),
            features: s.sample().features.clone(),
            label,
            provenance,
        };
        let mut entries = Vec::with_capacity(2 * n);
        for i in pick(&tps, n) {
            entries.push(entry(tps[i], LabelKind::Anomalous, Provenance::ConfirmedTp));
        }
        let fp_take = n.min(fps.len());
        for i in pick(&fps, fp_take) {
            entries.push(entry(fps[i], LabelKind::Normal, Provenance::ConfirmedFp));
        }
        for i in pick(&pseudo_normals, n - fp_take) {
            entries.push(entry(
                pseudo_normals[i],
                LabelKind::Normal,
                Provenance::SampledPseudoNormal,
            ));
        }
        let summary = WarmupSummary {
            stream_size: self.scored.len() as u64,
            requests: self.items.len() as u64,
            confirmed_tp: tps.len() as u64,
            confirmed_fp: fps.len() as u64,
            validation_pairs: n as u64,
        };
        Ok((ValidationSet::new(entries)?, summary))
    }
}

/// Standalone warm-up: annotate, build the validation set, calibrate.
pub fn warmup<A: Annotator + ?Sized>(
    warm_stream: &[Sample],
    source_model: &ScorerModel,
    source_threshold: f64,
    annotator: &mut A,
    target_pairs: usize,
    rng_seed: u64,
) -> Result<(ValidationSet, ThresholdState), PipelineError> {
    let plan = WarmupPlan::new(warm_stream, source_model, source_threshold, 0)?;
    let verdicts = annotator.review(plan.review_items())?;
    let (vs, _) = plan.build_validation(&verdicts, target_pairs, rng_seed)?;
    let threshold = calibrate(source_model, &vs, 0)?;
    Ok((vs, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingOrigin {
    AllData,
    PseudoNormal,
    ConfirmedFp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEntry {
    pub sample_id: String,
    pub seq: u64,
    pub features: Vec<f64>,
    pub origin: TrainingOrigin,
}

impl AsRef<[f64]> for TrainingEntry {
    fn as_ref(&self) -> &[f64] {
        &self.features
    }
}

/// Training set K for one slice, ordered by `seq`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetK {
    pub entries: Vec<TrainingEntry>,
}

impl TrainingSetK {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.sample_id.as_str()).collect()
    }

    pub fn ids_with_origin(&self, origin: TrainingOrigin) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.origin == origin)
            .map(|e| e.sample_id.as_str())
            .collect()
    }
}

/// Assembles K for a methodology from a scored slice, its pseudo-labels, the
/// requests that were reviewed and their verdicts.
///
/// Continual takes the whole slice, pseudo-continual the pseudo-normals, and
/// both active-learning variants the pseudo-normals plus reviewed samples
/// judged false positive. Positives accepted without review never enter K.
pub fn build_training_set(
    method: Methodology,
    slice: &[ScoredSample],
    pseudo: &[PseudoLabel],
    reviewed: &[AnnotationRequest],
    verdicts: &[AnnotationVerdict],
) -> Result<TrainingSetK, PipelineError> {
    if slice.len() != pseudo.len() || slice.iter().zip(pseudo).any(|(s, p)| s.sample().id != p.sample_id) {
        return Err(PipelineError::PseudoLabelMismatch);
    }
    let confirmed_fp: BTreeSet<String> = if method.requests_annotation() {
        let resolved = resolve_verdicts(reviewed, verdicts)?;
        reviewed
            .iter()
            .filter(|r| resolved[&r.request_id] == Verdict::Fp)
            .map(|r| r.sample_id.clone())
            .collect()
    } else {
        BTreeSet::new()
    };

    let mut entries: Vec<TrainingEntry> = slice
        .iter()
        .zip(pseudo)
        .filter_map(|(s, p)| {
            let origin = match method {
                Methodology::Continual => Some(TrainingOrigin::AllData),
                _ if p.label == LabelKind::Normal => Some(TrainingOrigin::PseudoNormal),
                Methodology::ActiveLearning | Methodology::AlLight if confirmed_fp.contains(&s.sample().id) => {
                    Some(TrainingOrigin::ConfirmedFp)
                }
                _ => None,
            }?;
            Some(TrainingEntry {
                sample_id: s.sample().id.clone(),
                seq: s.sample().seq,
                features: s.sample().features.clone(),
                origin,
            })
        })
        .collect();
    entries.sort_by_key(|e| e.seq);
    Ok(TrainingSetK { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice_index: i64,
    pub threshold_used: ThresholdState,
    pub confusion: ConfusionCounts,
    /// Pseudo-positives eligible for review (zero for methodologies that
    /// never ask an annotator).
    pub annotation_requests: u64,
    /// Requests actually sent to the annotator.
    pub annotation_reviewed: u64,
    pub auto_tp: u64,
    pub confirmed_fp: u64,
    pub k_size: u64,
    pub scorer_version_after: u32,
    pub max_score: Option<f64>,
    /// Upper band bound in force for this slice (AL-Light only).
    pub band_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub methodology: Methodology,
    pub warmup: WarmupSummary,
    pub per_slice: Vec<SliceReport>,
    pub cumulative: ConfusionCounts,
    pub cumulative_fnr: Option<f64>,
    pub cumulative_fpr: Option<f64>,
    pub cumulative_ebi: Option<f64>,
    /// Warm-up threshold followed by the threshold after each slice.
    pub threshold_trajectory: Vec<ThresholdState>,
    /// AL-Light only: `1 - reviewed / eligible` over the whole run.
    pub workload_reduction: Option<f64>,
}

/// A slice after steps 1-4, waiting for verdicts on `review_items`.
#[derive(Debug, Clone)]
pub struct PendingSlice {
    slice_index: i64,
    scored: Vec<ScoredSample>,
    pseudo: Vec<PseudoLabel>,
    items: Vec<ReviewItem>,
    auto_tp: Vec<String>,
    eligible: u64,
    confusion: ConfusionCounts,
    threshold_used: ThresholdState,
    band_upper: Option<f64>,
    max_score: Option<f64>,
    next_issue: u64,
}

impl PendingSlice {
    pub fn slice_index(&self) -> i64 {
        self.slice_index
    }

    pub fn scored(&self) -> &[ScoredSample] {
        &self.scored
    }

    pub fn pseudo_labels(&self) -> &[PseudoLabel] {
        &self.pseudo
    }

    pub fn review_items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn requests(&self) -> Vec<AnnotationRequest> {
        self.items.iter().map(|i| i.request.clone()).collect()
    }

    pub fn auto_tp_ids(&self) -> &[String] {
        &self.auto_tp
    }

    /// Prequential confusion, computed before any training on this slice.
    pub fn confusion(&self) -> ConfusionCounts {
        self.confusion
    }

    pub fn threshold_used(&self) -> &ThresholdState {
        &self.threshold_used
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceOutcome {
    pub report: SliceReport,
    pub training_set: TrainingSetK,
}

/// Everything the loop carries between slices. Serializable so a run can be
/// checkpointed at an annotation barrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub model: ScorerModel,
    pub threshold: ThresholdState,
    pub validation: ValidationSet,
    pub band: RollingBandState,
    pub buffer: TrainingBuffer,
    pub next_issue: u64,
    pub warmup: WarmupSummary,
    pub reports: Vec<SliceReport>,
    pub trajectory: Vec<ThresholdState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    config: PipelineConfig,
    state: PipelineState,
}

impl Pipeline {
    /// Scores the warm-up stream and returns the plan awaiting verdicts.
    pub fn plan_warmup(
        config: &PipelineConfig,
        source_model: &ScorerModel,
        warm_stream: &[Sample],
        source_threshold: f64,
    ) -> Result<WarmupPlan, PipelineError> {
        config.validate_for(source_model)?;
        WarmupPlan::new(warm_stream, source_model, source_threshold, 0)
    }

    /// Completes warm-up with the verdicts for `plan` and sets up the loop.
    pub fn from_warmup(
        config: PipelineConfig,
        source_model: ScorerModel,
        plan: &WarmupPlan,
        verdicts: &[AnnotationVerdict],
    ) -> Result<Self, PipelineError> {
        config.validate_for(&source_model)?;
        let (validation, warmup) = plan.build_validation(verdicts, config.target_pairs, config.sampling_seed)?;
        let threshold = match config.threshold_policy {
            ThresholdPolicy::Recalibrate => calibrate(&source_model, &validation, 0)?,
            ThresholdPolicy::Frozen => measure_at(&source_model, &validation, plan.source_threshold, 0)?,
        };
        let mut band = RollingBandState::new(config.band.window, threshold.theta, config.band.mode);
        band.update(plan.max_score);
        Ok(Self {
            config,
            state: PipelineState {
                model: source_model,
                threshold,
                validation,
                band,
                buffer: TrainingBuffer::new(),
                next_issue: plan.next_issue,
                warmup,
                reports: Vec::new(),
                trajectory: alloc::vec![threshold],
            },
        })
    }

    /// Warm-up with a synchronous annotator.
    pub fn warm_up<A: Annotator + ?Sized>(
        config: PipelineConfig,
        source_model: ScorerModel,
        warm_stream: &[Sample],
        source_threshold: f64,
        annotator: &mut A,
    ) -> Result<Self, PipelineError> {
        let plan = Self::plan_warmup(&config, &source_model, warm_stream, source_threshold)?;
        let verdicts = annotator.review(plan.review_items())?;
        Self::from_warmup(config, source_model, &plan, &verdicts)
    }

    /// Rebuilds a pipeline from checkpointed state.
    pub fn from_state(config: PipelineConfig, state: PipelineState) -> Result<Self, PipelineError> {
        config.validate_for(&state.model)?;
        state.model.validate()?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn model(&self) -> &ScorerModel {
        &self.state.model
    }

    pub fn threshold(&self) -> &ThresholdState {
        &self.state.threshold
    }

    pub fn validation_set(&self) -> &ValidationSet {
        &self.state.validation
    }

    pub fn band(&self) -> &RollingBandState {
        &self.state.band
    }

    pub fn slices_done(&self) -> usize {
        self.state.reports.len()
    }

    /// Steps 1-4 for one slice. Leaves the pipeline untouched.
    pub fn begin_slice(&self, slice: &[Sample]) -> Result<PendingSlice, PipelineError> {
        let threshold = self.state.threshold;
        let theta = threshold.theta;
        let slice_index = slice.first().map_or(self.state.reports.len() as i64, |s| s.slice_index);

        let scored = score_all(&self.state.model, slice)?;
        let pseudo: Vec<PseudoLabel> = scored.iter().map(|s| pseudo_label(s, theta)).collect();

        let mut confusion = ConfusionCounts::default();
        for (s, p) in scored.iter().zip(&pseudo) {
            if let Some(truth) = s.sample().ground_truth {
                confusion.record(p.label, truth);
            }
        }
        let max_score = scored.iter().map(ScoredSample::score).reduce(f64::max);

        let positives: Vec<ScoredSample> = scored
            .iter()
            .zip(&pseudo)
            .filter(|(_, p)| p.label == LabelKind::Anomalous)
            .map(|(s, _)| s.clone())
            .collect();

        let mut band_upper = None;
        let (eligible, to_review, auto_tp): (u64, Vec<&ScoredSample>, Vec<String>) = match self.config.methodology {
            Methodology::Continual | Methodology::PseudoContinual => (0, Vec::new(), Vec::new()),
            Methodology::ActiveLearning => (positives.len() as u64, positives.iter().collect(), Vec::new()),
            Methodology::AlLight => {
                band_upper = self.state.band.theta_med();
                let split = filter_requests(&positives, &self.state.band);
                let auto = split.auto_tp.iter().map(|s| s.sample().id.clone()).collect();
                (positives.len() as u64, split.to_review, auto)
            }
        };

        let mut next_issue = self.state.next_issue;
        let items = to_review
            .into_iter()
            .map(|s| {
                let item = make_request(s, slice_index, next_issue);
                next_issue += 1;
                item
            })
            .collect();

        Ok(PendingSlice {
            slice_index,
            scored,
            pseudo,
            items,
            auto_tp,
            eligible,
            confusion,
            threshold_used: threshold,
            band_upper,
            max_score,
            next_issue,
        })
    }

    /// Steps 5-8. On error the pipeline is left exactly as it was.
    pub fn finish_slice(
        &mut self,
        pending: PendingSlice,
        verdicts: &[AnnotationVerdict],
    ) -> Result<SliceOutcome, PipelineError> {
        let reviewed: Vec<AnnotationRequest> = pending.requests();
        let training_set = build_training_set(
            self.config.methodology,
            &pending.scored,
            &pending.pseudo,
            &reviewed,
            verdicts,
        )?;
        let confirmed_fp = training_set.ids_with_origin(TrainingOrigin::ConfirmedFp).len() as u64;

        let mut buffer = self.state.buffer.clone();
        let model = if self.config.train {
            self.state
                .model
                .refit(&training_set.entries, &self.config.refit, &mut buffer)?
                .model
        } else {
            self.state.model.clone()
        };

        let prev = self.state.threshold;
        let threshold = match self.config.threshold_policy {
            ThresholdPolicy::Recalibrate => calibrate(&model, &self.state.validation, prev.calibration_round + 1)?,
            ThresholdPolicy::Frozen => measure_at(&model, &self.state.validation, prev.theta, prev.calibration_round)?,
        };

        let report = SliceReport {
            slice_index: pending.slice_index,
            threshold_used: pending.threshold_used,
            confusion: pending.confusion,
            annotation_requests: pending.eligible,
            annotation_reviewed: pending.items.len() as u64,
            auto_tp: pending.auto_tp.len() as u64,
            confirmed_fp,
            k_size: training_set.len() as u64,
            scorer_version_after: model.version,
            max_score: pending.max_score,
            band_upper: pending.band_upper,
        };

        let st = &mut self.state;
        st.model = model;
        st.buffer = buffer;
        st.threshold = threshold;
        st.band.set_theta(threshold.theta);
        if let Some(m) = pending.max_score {
            st.band.update(m);
        }
        st.next_issue = pending.next_issue;
        st.reports.push(report.clone());
        st.trajectory.push(threshold);

        Ok(SliceOutcome { report, training_set })
    }

    /// Runs one slice end to end with a synchronous annotator.
    pub fn run_slice<A: Annotator + ?Sized>(
        &mut self,
        slice: &[Sample],
        annotator: &mut A,
    ) -> Result<SliceOutcome, PipelineError> {
        let pending = self.begin_slice(slice)?;
        let verdicts = if pending.items.is_empty() {
            Vec::new()
        } else {
            annotator.review(&pending.items)?
        };
        self.finish_slice(pending, &verdicts)
    }

    pub fn report(&self) -> RunReport {
        let cumulative: ConfusionCounts = self.state.reports.iter().map(|r| r.confusion).sum();
        let (fpr, fnr) = match rates(&cumulative) {
            Ok((f, n)) => (Some(f), Some(n)),
            Err(_) => (None, None),
        };
        let cumulative_ebi = match (fpr, fnr) {
            (Some(f), Some(n)) => ebi(f, n).ok(),
            _ => None,
        };
        let workload_reduction = if self.config.methodology == Methodology::AlLight {
            let full: u64 = self.state.reports.iter().map(|r| r.annotation_requests).sum();
            let light: u64 = self.state.reports.iter().map(|r| r.annotation_reviewed).sum();
            crate::annotation::workload_reduction(full, light).ok()
        } else {
            None
        };
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            methodology: self.config.methodology,
            warmup: self.state.warmup,
            per_slice: self.state.reports.clone(),
            cumulative,
            cumulative_fnr: fnr,
            cumulative_fpr: fpr,
            cumulative_ebi,
            threshold_trajectory: self.state.trajectory.clone(),
            workload_reduction,
        }
    }

    pub fn into_state(self) -> PipelineState {
        self.state
    }
}

/// Inputs for a complete run.
#[derive(Debug, Clone, Copy)]
pub struct RunInputs<'a> {
    pub warm: &'a [Sample],
    pub slices: &'a [Vec<Sample>],
    pub source_model: &'a ScorerModel,
    pub source_threshold: f64,
}

/// Warm-up followed by every slice in order.
pub fn run<A: Annotator + ?Sized>(
    config: &PipelineConfig,
    inputs: RunInputs<'_>,
    annotator: &mut A,
) -> Result<RunReport, PipelineError> {
    let mut p = Pipeline::warm_up(
        *config,
        inputs.source_model.clone(),
        inputs.warm,
        inputs.source_threshold,
        annotator,
    )?;
    for slice in inputs.slices {
        p.run_slice(slice, annotator)?;
    }
    Ok(p.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{OracleAnnotator, ScriptedAnnotator, VerdictSource};
    use crate::scorer::{RefitMode, ScorerConfig, ScorerParams};
    use alloc::vec;

    fn sample(id: &str, seq: u64, slice: i64, x: f64, truth: LabelKind) -> Sample {
        Sample {
            id: id.into(),
            seq,
            slice_index: slice,
            features: vec![x],
            ground_truth: Some(truth),
        }
    }

    fn unit_gaussian() -> ScorerModel {
        ScorerModel {
            params: ScorerParams::DiagGaussian {
                mean: vec![0.0],
                variance: vec![1.0],
                variance_floor: 1e-6,
            },
            version: 0,
            provenance: "source/K-1".into(),
        }
    }

    /// Warm stream laid out so the source threshold 1.0 (score = x^2) flags
    /// exactly `tp` anomalies and `fp` normals, and leaves `pn` normals below.
    fn warm_stream(tp: usize, fp: usize, pn: usize) -> Vec<Sample> {
        let mut v = Vec::new();
        let mut seq = 0;
        for i in 0..tp {
            v.push(sample(
                &format!("tp{i}"),
                seq,
                -1,
                3.0 + i as f64 * 0.01,
                LabelKind::Anomalous,
            ));
            seq += 1;
        }
        for i in 0..fp {
            v.push(sample(
                &format!("fp{i}"),
                seq,
                -1,
                1.5 + i as f64 * 0.01,
                LabelKind::Normal,
            ));
            seq += 1;
        }
        for i in 0..pn {
            v.push(sample(
                &format!("pn{i}"),
                seq,
                -1,
                (i % 90) as f64 * 0.01,
                LabelKind::Normal,
            ));
            seq += 1;
        }
        v
    }

    #[test]
    fn warmup_balance_rule() {
        let stream = warm_stream(10, 2, 500);
        let plan = WarmupPlan::new(&stream, &unit_gaussian(), 1.0, 0).unwrap();
        assert_eq!(plan.review_items().len(), 12);
        let verdicts = OracleAnnotator::perfect().review(plan.review_items()).unwrap();
        let (vs, summary) = plan.build_validation(&verdicts, 10, 3).unwrap();
        assert_eq!(vs.len(), 20);
        let count = |p| vs.entries().iter().filter(|e| e.provenance == p).count();
        assert_eq!(count(Provenance::ConfirmedTp), 10);
        assert_eq!(count(Provenance::ConfirmedFp), 2);
        assert_eq!(count(Provenance::SampledPseudoNormal), 8);
        assert_eq!(summary.validation_pairs, 10);
    }

    #[test]
    fn warmup_shrinks_to_confirmed_tp_count() {
        let stream = warm_stream(4, 1, 50);
        let plan = WarmupPlan::new(&stream, &unit_gaussian(), 1.0, 0).unwrap();
        let verdicts = OracleAnnotator::perfect().review(plan.review_items()).unwrap();
        let (vs, _) = plan.build_validation(&verdicts, 500, 0).unwrap();
        assert_eq!(vs.pairs(), 4);
    }

    #[test]
    fn warmup_without_positives_fails() {
        let stream = warm_stream(0, 0, 30);
        let err = warmup(&stream, &unit_gaussian(), 1.0, &mut OracleAnnotator::perfect(), 10, 0);
        assert_eq!(err, Err(PipelineError::InsufficientAnomalies));
        assert_eq!(
            warmup(&[], &unit_gaussian(), 1.0, &mut OracleAnnotator::perfect(), 10, 0),
            Err(PipelineError::EmptyWarmStream)
        );
    }

    #[test]
    fn warmup_rejects_bad_verdict_lists() {
        let stream = warm_stream(2, 1, 10);
        let plan = WarmupPlan::new(&stream, &unit_gaussian(), 1.0, 0).unwrap();
        let mut verdicts = OracleAnnotator::perfect().review(plan.review_items()).unwrap();
        let last = verdicts.pop().unwrap();
        assert!(matches!(
            plan.build_validation(&verdicts, 10, 0),
            Err(PipelineError::MissingVerdict(_))
        ));
        verdicts.push(last.clone());
        verdicts.push(last.clone());
        assert!(plan.build_validation(&verdicts, 10, 0).is_ok());
        let mut conflicting = last.clone();
        conflicting.verdict = match last.verdict {
            Verdict::Tp => Verdict::Fp,
            Verdict::Fp => Verdict::Tp,
        };
        verdicts.push(conflicting);
        assert!(matches!(
            plan.build_validation(&verdicts, 10, 0),
            Err(PipelineError::ConflictingVerdict(_))
        ));
        let stray = AnnotationVerdict {
            request_id: "nope".into(),
            verdict: Verdict::Tp,
            source: VerdictSource::Human,
        };
        assert!(matches!(
            plan.build_validation(&[stray], 10, 0),
            Err(PipelineError::UnknownRequest(_))
        ));
    }

    #[test]
    fn separable_warmup_gives_zero_error_threshold() {
        let stream = warm_stream(20, 5, 200);
        let (vs, th) = warmup(&stream, &unit_gaussian(), 1.0, &mut OracleAnnotator::perfect(), 20, 1).unwrap();
        assert_eq!(vs.pairs(), 20);
        assert_eq!((th.fpr_at_theta, th.fnr_at_theta), (0.0, 0.0));
        assert_eq!(th.calibration_round, 0);
    }

    fn scored_slice(n: usize, positives: usize) -> (Vec<ScoredSample>, Vec<PseudoLabel>) {
        let scored: Vec<ScoredSample> = (0..n)
            .map(|i| {
                let s = sample(&format!("x{i}"), i as u64, 0, 0.0, LabelKind::Normal);
                ScoredSample::new(s, if i < positives { 5.0 } else { 0.1 }).unwrap()
            })
            .collect();
        let pseudo = scored.iter().map(|s| pseudo_label(s, 1.0)).collect();
        (scored, pseudo)
    }

    fn requests_for(scored: &[ScoredSample], pseudo: &[PseudoLabel]) -> Vec<AnnotationRequest> {
        scored
            .iter()
            .zip(pseudo)
            .filter(|(_, p)| p.label == LabelKind::Anomalous)
            .enumerate()
            .map(|(i, (s, _))| make_request(s, 0, i as u64).request)
            .collect()
    }

    #[test]
    fn training_set_sizes_per_methodology() {
        let (scored, pseudo) = scored_slice(100, 7);
        let reqs = requests_for(&scored, &pseudo);
        let verdicts: Vec<AnnotationVerdict> = reqs
            .iter()
            .enumerate()
            .map(|(i, r)| AnnotationVerdict {
                request_id: r.request_id.clone(),
                verdict: if i < 3 { Verdict::Fp } else { Verdict::Tp },
                source: VerdictSource::Human,
            })
            .collect();
        let k = |m| build_training_set(m, &scored, &pseudo, &reqs, &verdicts).unwrap();
        assert_eq!(k(Methodology::PseudoContinual).len(), 93);
        assert_eq!(k(Methodology::ActiveLearning).len(), 96);
        assert_eq!(k(Methodology::Continual).len(), 100);
        assert_eq!(
            build_training_set(Methodology::ActiveLearning, &scored, &pseudo, &reqs, &verdicts[1..]),
            Err(PipelineError::MissingVerdict(reqs[0].request_id.clone()))
        );
        assert_eq!(
            build_training_set(Methodology::Continual, &scored, &pseudo[1..], &reqs, &verdicts),
            Err(PipelineError::PseudoLabelMismatch)
        );
        let al = k(Methodology::ActiveLearning);
        assert!(al.entries.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    fn slice_of(index: i64, xs: &[(f64, LabelKind)]) -> Vec<Sample> {
        xs.iter()
            .enumerate()
            .map(|(i, &(x, t))| sample(&format!("s{index}-{i}"), i as u64, index, x, t))
            .collect()
    }

    fn base_pipeline(config: PipelineConfig) -> Pipeline {
        let stream = warm_stream(20, 5, 200);
        Pipeline::warm_up(config, unit_gaussian(), &stream, 1.0, &mut OracleAnnotator::perfect()).unwrap()
    }

    #[test]
    fn zero_alpha_refit_only_advances_calibration_round() {
        let config = PipelineConfig {
            refit: RefitPolicy {
                blend_alpha: 0.0,
                mode: RefitMode::CurrentSliceOnly,
                ..RefitPolicy::default()
            },
            ..PipelineConfig::default()
        };
        let mut p = base_pipeline(config);
        let slice = slice_of(
            0,
            &[
                (0.1, LabelKind::Normal),
                (4.0, LabelKind::Anomalous),
                (1.2, LabelKind::Normal),
            ],
        );
        p.run_slice(&slice, &mut OracleAnnotator::perfect()).unwrap();
        let t = &p.report().threshold_trajectory;
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].theta, t[1].theta);
        assert_eq!(
            (t[0].fpr_at_theta, t[0].fnr_at_theta),
            (t[1].fpr_at_theta, t[1].fnr_at_theta)
        );
        assert_eq!((t[0].calibration_round, t[1].calibration_round), (0, 1));
    }

    #[test]
    fn slice_confusion_matches_direct_thresholding() {
        let mut p = base_pipeline(PipelineConfig::default());
        let xs: Vec<(f64, LabelKind)> = (0..50)
            .map(|i| {
                if i % 10 == 0 {
                    (4.0 + i as f64 * 0.01, LabelKind::Anomalous)
                } else {
                    (i as f64 * 0.01, LabelKind::Normal)
                }
            })
            .collect();
        let slice = slice_of(0, &xs);
        let theta = p.threshold().theta;
        let model = p.model().clone();
        let direct = ConfusionCounts::at_threshold(
            slice.iter().map(|s| (model.score(s).unwrap(), s.ground_truth.unwrap())),
            theta,
        );
        let out = p.run_slice(&slice, &mut OracleAnnotator::perfect()).unwrap();
        assert_eq!(out.report.confusion, direct);
        assert_eq!(out.report.confusion.total(), 50);
    }

    #[test]
    fn failed_finish_leaves_state_untouched() {
        let mut p = base_pipeline(PipelineConfig::default());
        let slice = slice_of(0, &[(4.0, LabelKind::Anomalous), (0.0, LabelKind::Normal)]);
        let before = p.clone();
        let pending = p.begin_slice(&slice).unwrap();
        assert_eq!(pending.review_items().len(), 1);
        assert!(p.finish_slice(pending, &[]).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn scripted_verdicts_reproduce_oracle_run() {
        let slices: Vec<Vec<Sample>> = (0..3)
            .map(|k| {
                slice_of(
                    k,
                    &[
                        (0.1, LabelKind::Normal),
                        (2.5, LabelKind::Normal),
                        (4.0, LabelKind::Anomalous),
                        (0.3, LabelKind::Normal),
                    ],
                )
            })
            .collect();
        let warm = warm_stream(20, 5, 200);
        let source = unit_gaussian();
        let inputs = RunInputs {
            warm: &warm,
            slices: &slices,
            source_model: &source,
            source_threshold: 1.0,
        };
        let config = PipelineConfig::default();
        let mut rec = crate::annotation::RecordingAnnotator::new(OracleAnnotator::perfect());
        let a = run(&config, inputs, &mut rec).unwrap();
        let mut scripted = ScriptedAnnotator::new(rec.into_log());
        let b = run(&config, inputs, &mut scripted).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_slice.len(), 3);
    }

    #[test]
    fn replay_requires_training_disabled() {
        let mut scores = BTreeMap::new();
        scores.insert(String::from("a"), 1.0);
        let m = ScorerModel::replay(scores, "deep").unwrap();
        let err = PipelineConfig::default().validate_for(&m).unwrap_err();
        assert!(matches!(err, PipelineError::InvalidConfig(ref v) if v[0].path == "train"));
        let ok = PipelineConfig {
            train: false,
            ..PipelineConfig::default()
        };
        assert!(ok.validate_for(&m).is_ok());
        let bad = PipelineConfig {
            target_pairs: 0,
            band: BandConfig {
                window: 0,
                ..BandConfig::default()
            },
            ..PipelineConfig::default()
        };
        assert_eq!(bad.issues().len(), 2);
    }

    #[test]
    fn frozen_policy_keeps_source_threshold() {
        let config = PipelineConfig {
            threshold_policy: ThresholdPolicy::Frozen,
            ..PipelineConfig::default()
        };
        let mut p = base_pipeline(config);
        assert_eq!(p.threshold().theta, 1.0);
        let slice = slice_of(0, &[(0.1, LabelKind::Normal), (4.0, LabelKind::Anomalous)]);
        p.run_slice(&slice, &mut OracleAnnotator::perfect()).unwrap();
        assert!(p.report().threshold_trajectory.iter().all(|t| t.theta == 1.0));
    }

    #[test]
    fn knn_pipeline_runs() {
        let cfg = ScorerConfig {
            knn_k: 3,
            knn_capacity: 100,
            ..ScorerConfig::default()
        };
        let normals: Vec<Vec<f64>> = (0..50).map(|i| vec![(i % 10) as f64 * 0.1]).collect();
        let model = ScorerModel::fit(ScorerKind::KnnDistance, &normals, &cfg, "source").unwrap();
        let warm = warm_stream(10, 2, 50);
        let mut p = Pipeline::warm_up(
            PipelineConfig::default(),
            model,
            &warm,
            1.0,
            &mut OracleAnnotator::perfect(),
        )
        .unwrap();
        let slice = slice_of(0, &[(0.2, LabelKind::Normal), (5.0, LabelKind::Anomalous)]);
        let out = p.run_slice(&slice, &mut OracleAnnotator::perfect()).unwrap();
        assert_eq!(out.report.scorer_version_after, 1);
    }
}
