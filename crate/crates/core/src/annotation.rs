//! Human-in-the-loop plumbing: annotation requests and verdicts, the
//! ground-truth oracle, the AL-Light review band and workload accounting.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::quantile_sorted;
use crate::model::{LabelKind, ScoredSample};

pub const DEFAULT_BAND_WINDOW: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("no ground truth for sample {0}")]
    MissingGroundTruth(String),
    #[error("flip probability {0} outside [0, 0.5]")]
    InvalidFlipProbability(f64),
    #[error("no verdict for request {0}")]
    MissingVerdict(String),
    #[error("full review count must be positive")]
    DivisionByZero,
    #[error("light review count {light} exceeds full count {full}")]
    InvalidCounts { full: u64, light: u64 },
    #[error("annotator unavailable: {0}")]
    Unavailable(String),
}

/// A pseudo-positive sample sent for human review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub request_id: String,
    pub sample_id: String,
    pub score: f64,
    #[serde(rename = "slice")]
    pub slice_index: i64,
    pub features: Vec<f64>,
    pub issued_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "FP")]
    Fp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationVerdict {
    pub request_id: String,
    pub verdict: Verdict,
    pub source: VerdictSource,
}

/// A request paired with the sample's ground truth, when the stream has one.
/// Only the oracle looks at `truth`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewItem {
    pub request: AnnotationRequest,
    pub truth: Option<LabelKind>,
}

/// Anything that can turn a batch of review items into verdicts, one per
/// request, synchronously.
pub trait Annotator {
    fn review(&mut self, items: &[ReviewItem]) -> Result<Vec<AnnotationVerdict>, AnnotationError>;
}

impl<A: Annotator + ?Sized> Annotator for &mut A {
    fn review(&mut self, items: &[ReviewItem]) -> Result<Vec<AnnotationVerdict>, AnnotationError> {
        (**self).review(items)
    }
}

fn check_flip(p: f64) -> Result<f64, AnnotationError> {
    if (0.0..=0.5).contains(&p) {
        Ok(p)
    } else {
        Err(AnnotationError::InvalidFlipProbability(p))
    }
}

/// Simulated annotator: answers from ground truth, flipping each answer with
/// probability `flip_probability`.
///
/// The flip draw for a request comes from ChaCha stream `issued_at` of the
/// seeded generator, so a verdict depends only on `(seed, issued_at, truth)`
/// and not on how requests were batched.
pub fn oracle_verdict(
    req: &AnnotationRequest,
    truth: Option<LabelKind>,
    flip_probability: f64,
    seed: u64,
) -> Result<AnnotationVerdict, AnnotationError> {
    let p = check_flip(flip_probability)?;
    let truth = truth.ok_or_else(|| AnnotationError::MissingGroundTruth(req.sample_id.clone()))?;
    let honest = match truth {
        LabelKind::Anomalous => Verdict::Tp,
        LabelKind::Normal => Verdict::Fp,
    };
    let flip = p > 0.0 && {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(req.issued_at);
        rng.random_bool(p)
    };
    let verdict = match (honest, flip) {
        (v, false) => v,
        (Verdict::Tp, true) => Verdict::Fp,
        (Verdict::Fp, true) => Verdict::Tp,
    };
    Ok(AnnotationVerdict {
        request_id: req.request_id.clone(),
        verdict,
        source: VerdictSource::Oracle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleAnnotator {
    pub flip_probability: f64,
    pub seed: u64,
}

impl OracleAnnotator {
    pub fn new(flip_probability: f64, seed: u64) -> Result<Self, AnnotationError> {
        check_flip(flip_probability)?;
        Ok(Self { flip_probability, seed })
    }

    pub fn perfect() -> Self {
        Self {
            flip_probability: 0.0,
            seed: 0,
        }
    }
}

impl Annotator for OracleAnnotator {
    fn review(&mut self, items: &[ReviewItem]) -> Result<Vec<AnnotationVerdict>, AnnotationError> {
        items
            .iter()
            .map(|it| oracle_verdict(&it.request, it.truth, self.flip_probability, self.seed))
            .collect()
    }
}

/// Replays a fixed verdict log keyed by request id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedAnnotator {
    verdicts: BTreeMap<String, (Verdict, VerdictSource)>,
    source: Option<VerdictSource>,
}

impl ScriptedAnnotator {
    pub fn new<I>(log: I) -> Self
    where
        I: IntoIterator<Item = AnnotationVerdict>,
    {
        Self {
            verdicts: log.into_iter().map(|v| (v.request_id, (v.verdict, v.source))).collect(),
            source: None,
        }
    }

    /// Overrides the source recorded on replayed verdicts (default: the
    /// source stored in the log).
    pub fn with_source(mut self, source: VerdictSource) -> Self {
        self.source = Some(source);
        self
    }
}

impl Annotator for ScriptedAnnotator {
    fn review(&mut self, items: &[ReviewItem]) -> Result<Vec<AnnotationVerdict>, AnnotationError> {
        items
            .iter()
            .map(|it| {
                let id = &it.request.request_id;
                self.verdicts
                    .get(id)
                    .map(|&(verdict, logged)| AnnotationVerdict {
                        request_id: id.clone(),
                        verdict,
                        source: self.source.unwrap_or(logged),
                    })
                    .ok_or_else(|| AnnotationError::MissingVerdict(id.clone()))
            })
            .collect()
    }
}

/// Wraps an annotator and keeps every verdict it produced, in order.
#[derive(Debug)]
pub struct RecordingAnnotator<A> {
    inner: A,
    log: Vec<AnnotationVerdict>,
}

impl<A: Annotator> RecordingAnnotator<A> {
    pub fn new(inner: A) -> Self {
        Self { inner, log: Vec::new() }
    }

    pub fn log(&self) -> &[AnnotationVerdict] {
        &self.log
    }

    pub fn into_log(self) -> Vec<AnnotationVerdict> {
        self.log
    }
}

impl<A: Annotator> Annotator for RecordingAnnotator<A> {
    fn review(&mut self, items: &[ReviewItem]) -> Result<Vec<AnnotationVerdict>, AnnotationError> {
        let out = self.inner.review(items)?;
        self.log.extend(out.iter().cloned());
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// Upper bound is the median of the recent per-step maxima.
    #[default]
    WindowPercentile,
    /// Upper bound is halfway between the threshold and the window maximum.
    ThetaMaxMidpoint,
}

/// Rolling state behind the AL-Light review band `[theta_eer, theta_med]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingBandState {
    window: VecDeque<f64>,
    capacity: usize,
    theta_eer: f64,
    mode: BandMode,
}

impl RollingBandState {
    /// `capacity` is clamped to at least one step.
    pub fn new(capacity: usize, theta_eer: f64, mode: BandMode) -> Self {
        Self {
            window: VecDeque::new(),
            capacity: capacity.max(1),
            theta_eer,
            mode,
        }
    }

    pub fn theta_eer(&self) -> f64 {
        self.theta_eer
    }

    pub fn mode(&self) -> BandMode {
        self.mode
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn window(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn set_theta(&mut self, theta: f64) {
        self.theta_eer = theta;
    }

    /// Pushes one step's maximum score, evicting the oldest beyond capacity.
    /// Non-finite values are ignored.
    pub fn update(&mut self, step_max_score: f64) {
        if !step_max_score.is_finite() {
            return;
        }
        while self.window.len() >= self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(step_max_score);
    }

    /// Upper band bound, clamped to at least `theta_eer`. `None` while the
    /// window is empty, in which case the band is unbounded above.
    pub fn theta_med(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        let raw = match self.mode {
            BandMode::WindowPercentile => {
                let mut sorted: Vec<f64> = self.window.iter().copied().collect();
                sorted.sort_by(f64::total_cmp);
                quantile_sorted(&sorted, 0.5).expect("non-empty window")
            }
            BandMode::ThetaMaxMidpoint => {
                let max = self.window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (self.theta_eer + max) / 2.0
            }
        };
        Some(raw.max(self.theta_eer))
    }

    pub fn in_band(&self, score: f64) -> bool {
        self.theta_med().is_none_or(|upper| score <= upper)
    }
}

/// Band split of a slice's pseudo-positives.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSplit<'a> {
    pub to_review: Vec<&'a ScoredSample>,
    pub auto_tp: Vec<&'a ScoredSample>,
}

/// Splits pseudo-positives into those sent for review (score within
/// `[theta_eer, theta_med]`) and those above the band, accepted as true
/// positives without review. Every input lands in exactly one side; scores
/// below `theta_eer` (which should not occur) go to review.
pub fn filter_requests<'a>(positives: &'a [ScoredSample], state: &RollingBandState) -> BandSplit<'a> {
    let (to_review, auto_tp) = positives.iter().partition(|s| state.in_band(s.score()));
    BandSplit { to_review, auto_tp }
}

/// Fraction of full-review workload saved: `1 - light / full`.
pub fn workload_reduction(full_count: u64, light_count: u64) -> Result<f64, AnnotationError> {
    if full_count == 0 {
        return Err(AnnotationError::DivisionByZero);
    }
    if light_count > full_count {
        return Err(AnnotationError::InvalidCounts {
            full: full_count,
            light: light_count,
        });
    }
    Ok(1.0 - light_count as f64 / full_count as f64)
}
