//! Pluggable anomaly scorers.
//!
//! Two closed-form reference scorers (a diagonal Gaussian and a k-nearest
//! neighbour distance) can be fit and refit on normal-believed data. Scores
//! produced elsewhere, for example by a deep detector, enter through the
//! replay scorer, which looks scores up by sample id and cannot be trained.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_KNN_K: usize = 5;
pub const DEFAULT_KNN_CAPACITY: usize = 5_000;
pub const DEFAULT_BUFFER_CAPACITY: usize = 50_000;
pub const DEFAULT_BLEND_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("feature dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("replay scorer has no score for sample {0}")]
    UnknownSampleId(String),
    #[error("replay scorer cannot be trained")]
    ReplayNotTrainable,
    #[error("invalid scorer parameters: {0}")]
    InvalidParameters(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    DiagGaussian,
    KnnDistance,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub variance_floor: f64,
    pub knn_k: usize,
    pub knn_capacity: usize,
    /// Seeds exemplar reservoir sampling.
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            knn_k: DEFAULT_KNN_K,
            knn_capacity: DEFAULT_KNN_CAPACITY,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerParams {
    DiagGaussian {
        mean: Vec<f64>,
        variance: Vec<f64>,
        variance_floor: f64,
    },
    KnnDistance {
        k: usize,
        capacity: usize,
        seed: u64,
        exemplars: Vec<Vec<f64>>,
    },
    Replay {
        scores: BTreeMap<String, f64>,
    },
}

/// A fitted scorer. Immutable: refitting returns a new model with a higher
/// version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    #[serde(flatten)]
    pub params: ScorerParams,
    pub version: u32,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitMode {
    CurrentSliceOnly,
    ReplayBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefitPolicy {
    pub mode: RefitMode,
    pub buffer_capacity: usize,
    /// Weight of the new moments when blending Gaussian statistics.
    pub blend_alpha: f64,
}

impl Default for RefitPolicy {
    fn default() -> Self {
        Self {
            mode: RefitMode::ReplayBuffer,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            blend_alpha: DEFAULT_BLEND_ALPHA,
        }
    }
}

impl RefitPolicy {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if !(0.0..=1.0).contains(&self.blend_alpha) {
            return Err(ScorerError::InvalidParameters("blend_alpha must lie in [0, 1]"));
        }
        if self.buffer_capacity == 0 {
            return Err(ScorerError::InvalidParameters("buffer_capacity must be positive"));
        }
        Ok(())
    }
}

/// FIFO buffer of past training features used by [`RefitMode::ReplayBuffer`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingBuffer {
    items: VecDeque<Vec<f64>>,
}

impl TrainingBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, features: Vec<f64>, capacity: usize) {
        while self.items.len() >= capacity {
            self.items.pop_front();
        }
        self.items.push_back(features);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.items.iter().map(Vec::as_slice)
    }
}

impl AsRef<[f64]> for Sample {
    fn as_ref(&self) -> &[f64] {
        &self.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefitOutcome {
    pub model: ScorerModel,
    /// Set when the training set was empty and the model was returned as is.
    pub noop: bool,
}

fn check_dims<'a, I>(rows: I) -> Result<usize, ScorerError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut dim = None;
    for r in rows {
        match dim {
            None => {
                if r.is_empty() {
                    return Err(ScorerError::InvalidParameters("feature dimension must be >= 1"));
                }
                dim = Some(r.len());
            }
            Some(d) if d != r.len() => {
                return Err(ScorerError::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                })
            }
            _ => {}
        }
    }
    dim.ok_or(ScorerError::EmptyTrainingSet)
}

/// Population mean and variance per dimension, variance offset by `floor`.
fn moments<'a, I>(rows: I, dim: usize, floor: f64) -> (Vec<f64>, Vec<f64>)
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut mean = alloc::vec![0.0; dim];
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
        n += 1;
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = alloc::vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v = *v / n as f64 + floor;
    }
    (mean, var)
}

/// Algorithm R reservoir sample of at most `capacity` rows, in input order
/// for the first `capacity` and replaced thereafter.
fn reservoir<'a, I>(rows: I, capacity: usize, seed: u64) -> Vec<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(capacity.min(1024));
    for (i, r) in rows.into_iter().enumerate() {
        if out.len() < capacity {
            out.push(r.to_vec());
        } else {
            let j = rng.random_range(0..=i);
            if j < capacity {
                out[j] = r.to_vec();
            }
        }
    }
    out
}

/// Derives the reservoir seed for a given model version.
fn version_seed(seed: u64, version: u32) -> u64 {
    seed ^ (version as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl ScorerModel {
    /// Fits a reference scorer on normal data. Version starts at 0.
    pub fn fit<F: AsRef<[f64]>>(
        kind: ScorerKind,
        normal: &[F],
        config: &ScorerConfig,
        provenance: impl Into<String>,
    ) -> Result<Self, ScorerError> {
        let rows = normal.iter().map(AsRef::as_ref);
        let dim = check_dims(rows.clone())?;
        let params = match kind {
            ScorerKind::DiagGaussian => {
                if config.variance_floor.is_nan() || config.variance_floor <= 0.0 {
                    return Err(ScorerError::InvalidParameters("variance_floor must be positive"));
                }
                let (mean, variance) = moments(rows, dim, config.variance_floor);
                ScorerParams::DiagGaussian {
                    mean,
                    variance,
                    variance_floor: config.variance_floor,
                }
            }
            ScorerKind::KnnDistance => {
                if config.knn_k == 0 || config.knn_capacity == 0 {
                    return Err(ScorerError::InvalidParameters("knn k and capacity must be positive"));
                }
                ScorerParams::KnnDistance {
                    k: config.knn_k,
                    capacity: config.knn_capacity,
                    seed: config.seed,
                    exemplars: reservoir(rows, config.knn_capacity, version_seed(config.seed, 0)),
                }
            }
            ScorerKind::Replay => return Err(ScorerError::ReplayNotTrainable),
        };
        Ok(Self {
            params,
            version: 0,
            provenance: provenance.into(),
        })
    }

    pub fn replay(scores: BTreeMap<String, f64>, provenance: impl Into<String>) -> Result<Self, ScorerError> {
        if scores.values().any(|s| !s.is_finite()) {
            return Err(ScorerError::InvalidParameters("replay scores must be finite"));
        }
        Ok(Self {
            params: ScorerParams::Replay { scores },
            version: 0,
            provenance: provenance.into(),
        })
    }

    pub fn kind(&self) -> ScorerKind {
        match self.params {
            ScorerParams::DiagGaussian { .. } => ScorerKind::DiagGaussian,
            ScorerParams::KnnDistance { .. } => ScorerKind::KnnDistance,
            ScorerParams::Replay { .. } => ScorerKind::Replay,
        }
    }

    /// Feature dimension, or `None` for replay models.
    pub fn dim(&self) -> Option<usize> {
        match &self.params {
            ScorerParams::DiagGaussian { mean, .. } => Some(mean.len()),
            ScorerParams::KnnDistance { exemplars, .. } => exemplars.first().map(Vec::len),
            ScorerParams::Replay { .. } => None,
        }
    }

    /// Checks invariants on a model loaded from outside (e.g. a checkpoint).
    pub fn validate(&self) -> Result<(), ScorerError> {
        match &self.params {
            ScorerParams::DiagGaussian {
                mean,
                variance,
                variance_floor,
            } => {
                if variance_floor.is_nan() || *variance_floor <= 0.0 {
                    return Err(ScorerError::InvalidParameters("variance_floor must be positive"));
                }
                if mean.is_empty() || mean.len() != variance.len() {
                    return Err(ScorerError::InvalidParameters("mean and variance lengths differ"));
                }
                if variance.iter().any(|v| !v.is_finite() || *v < *variance_floor)
                    || mean.iter().any(|m| !m.is_finite())
                {
                    return Err(ScorerError::InvalidParameters(
                        "variance below floor or non-finite moments",
                    ));
                }
            }
            ScorerParams::KnnDistance { k, exemplars, .. } => {
                if *k == 0 || exemplars.is_empty() {
                    return Err(ScorerError::InvalidParameters("knn needs k >= 1 and exemplars"));
                }
                check_dims(exemplars.iter().map(Vec::as_slice))?;
            }
            ScorerParams::Replay { scores } => {
                if scores.values().any(|s| !s.is_finite()) {
                    return Err(ScorerError::InvalidParameters("replay scores must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn score(&self, sample: &Sample) -> Result<f64, ScorerError> {
        self.score_parts(&sample.id, &sample.features)
    }

    /// Scores by id and features; replay models use only the id.
    pub fn score_parts(&self, id: &str, features: &[f64]) -> Result<f64, ScorerError> {
        match &self.params {
            ScorerParams::DiagGaussian { mean, variance, .. } => {
                if features.len() != mean.len() {
                    return Err(ScorerError::DimensionMismatch {
                        expected: mean.len(),
                        got: features.len(),
                    });
                }
                Ok(features
                    .iter()
                    .zip(mean)
                    .zip(variance)
                    .map(|((x, m), v)| (x - m) * (x - m) / v)
                    .sum())
            }
            ScorerParams::KnnDistance { k, exemplars, .. } => {
                let dim = exemplars.first().map_or(0, Vec::len);
                if features.len() != dim {
                    return Err(ScorerError::DimensionMismatch {
                        expected: dim,
                        got: features.len(),
                    });
                }
                Ok(knn_mean_distance(features, exemplars, *k))
            }
            ScorerParams::Replay { scores } => scores
                .get(id)
                .copied()
                .ok_or_else(|| ScorerError::UnknownSampleId(id.into())),
        }
    }

    /// Refits on training set `k` under `policy`, returning a new model with
    /// version + 1. An empty `k` returns the model unchanged with `noop` set.
    pub fn refit<F: AsRef<[f64]>>(
        &self,
        k: &[F],
        policy: &RefitPolicy,
        buffer: &mut TrainingBuffer,
    ) -> Result<RefitOutcome, ScorerError> {
        if matches!(self.params, ScorerParams::Replay { .. }) {
            return Err(ScorerError::ReplayNotTrainable);
        }
        policy.validate()?;
        if k.is_empty() {
            return Ok(RefitOutcome {
                model: self.clone(),
                noop: true,
            });
        }
        let dim = check_dims(k.iter().map(AsRef::as_ref))?;
        if let Some(expected) = self.dim() {
            if expected != dim {
                return Err(ScorerError::DimensionMismatch { expected, got: dim });
            }
        }
        if policy.mode == RefitMode::ReplayBuffer {
            for row in k {
                buffer.push(row.as_ref().to_vec(), policy.buffer_capacity);
            }
        }
        let version = self.version + 1;

        let params = match &self.params {
            ScorerParams::DiagGaussian {
                mean,
                variance,
                variance_floor,
            } => {
                let (new_mean, new_var) = match policy.mode {
                    RefitMode::CurrentSliceOnly => moments(k.iter().map(AsRef::as_ref), dim, *variance_floor),
                    RefitMode::ReplayBuffer => moments(buffer.iter(), dim, *variance_floor),
                };
                let a = policy.blend_alpha;
                let blend = |new: &[f64], old: &[f64]| -> Vec<f64> {
                    new.iter().zip(old).map(|(n, o)| a * n + (1.0 - a) * o).collect()
                };
                ScorerParams::DiagGaussian {
                    mean: blend(&new_mean, mean),
                    variance: blend(&new_var, variance),
                    variance_floor: *variance_floor,
                }
            }
            ScorerParams::KnnDistance {
                k: neighbours,
                capacity,
                seed,
                ..
            } => {
                let s = version_seed(*seed, version);
                let exemplars = match policy.mode {
                    RefitMode::CurrentSliceOnly => reservoir(k.iter().map(AsRef::as_ref), *capacity, s),
                    RefitMode::ReplayBuffer => reservoir(buffer.iter(), *capacity, s),
                };
                ScorerParams::KnnDistance {
                    k: *neighbours,
                    capacity: *capacity,
                    seed: *seed,
                    exemplars,
                }
            }
            ScorerParams::Replay { .. } => unreachable!("checked above"),
        };
        Ok(RefitOutcome {
            model: ScorerModel {
                params,
                version,
                provenance: self.provenance.clone(),
            },
            noop: false,
        })
    }
}

fn knn_mean_distance(x: &[f64], exemplars: &[Vec<f64>], k: usize) -> f64 {
    let k = k.min(exemplars.len());
    // Ascending list of the k smallest squared distances seen so far.
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for e in exemplars {
        let d2: f64 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.len() == k && d2 >= best[k - 1] {
            continue;
        }
        let pos = best.partition_point(|&b| b <= d2);
        best.insert(pos, d2);
        best.truncate(k);
    }
    best.iter().map(|d| libm::sqrt(*d)).sum::<f64>() / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    const EPS: f64 = DEFAULT_VARIANCE_FLOOR;

    fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> ScorerModel {
        ScorerModel {
            params: ScorerParams::DiagGaussian {
                mean,
                variance,
                variance_floor: EPS,
            },
            version: 0,
            provenance: "test".into(),
        }
    }

    fn moments_of(m: &ScorerModel) -> (&[f64], &[f64]) {
        match &m.params {
            ScorerParams::DiagGaussian { mean, variance, .. } => (mean, variance),
            _ => panic!("not gaussian"),
        }
    }

    #[test]
    fn fit_gaussian_population_moments_with_floor() {
        let data = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let m = ScorerModel::fit(ScorerKind::DiagGaussian, &data, &ScorerConfig::default(), "t").unwrap();
        let (mean, var) = moments_of(&m);
        assert_eq!(mean, &[1.0, 0.0]);
        assert_eq!(var, &[1.0 + EPS, EPS]);
        assert_eq!(m.version, 0);
    }

    #[test]
    fn fit_errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(
            ScorerModel::fit(ScorerKind::DiagGaussian, &empty, &ScorerConfig::default(), "t"),
            Err(ScorerError::EmptyTrainingSet)
        );
        let ragged = vec![vec![0.0, 0.0], vec![1.0]];
        assert!(matches!(
            ScorerModel::fit(ScorerKind::KnnDistance, &ragged, &ScorerConfig::default(), "t"),
            Err(ScorerError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert_eq!(
            ScorerModel::fit(ScorerKind::Replay, &[vec![0.0]], &ScorerConfig::default(), "t"),
            Err(ScorerError::ReplayNotTrainable)
        );
    }

    #[test]
    fn knn_self_distance_is_zero() {
        let cfg = ScorerConfig {
            knn_k: 1,
            ..ScorerConfig::default()
        };
        let m = ScorerModel::fit(ScorerKind::KnnDistance, &[vec![0.0, 0.0]], &cfg, "t").unwrap();
        assert_eq!(m.score_parts("a", &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.score_parts("a", &[3.0, 4.0]).unwrap(), 5.0);
    }

    #[test]
    fn knn_mean_of_k_nearest() {
        let cfg = ScorerConfig {
            knn_k: 2,
            ..ScorerConfig::default()
        };
        let data = vec![vec![1.0], vec![3.0], vec![10.0]];
        let m = ScorerModel::fit(ScorerKind::KnnDistance, &data, &cfg, "t").unwrap();
        assert_eq!(m.score_parts("a", &[0.0]).unwrap(), 2.0);
        // k larger than the exemplar set falls back to all exemplars.
        let cfg = ScorerConfig {
            knn_k: 10,
            ..ScorerConfig::default()
        };
        let m = ScorerModel::fit(ScorerKind::KnnDistance, &data, &cfg, "t").unwrap();
        assert!((m.score_parts("a", &[0.0]).unwrap() - 14.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_reservoir_caps_exemplars() {
        let cfg = ScorerConfig {
            knn_capacity: 10,
            seed: 7,
            ..ScorerConfig::default()
        };
        let data: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64]).collect();
        let m = ScorerModel::fit(ScorerKind::KnnDistance, &data, &cfg, "t").unwrap();
        let again = ScorerModel::fit(ScorerKind::KnnDistance, &data, &cfg, "t").unwrap();
        assert_eq!(m, again);
        match &m.params {
            ScorerParams::KnnDistance { exemplars, .. } => {
                assert_eq!(exemplars.len(), 10);
                // Not just the first ten rows.
                assert!(exemplars.iter().any(|e| e[0] >= 10.0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn gaussian_scores() {
        let m = gaussian(vec![1.0, 0.0], vec![1.0, 1.0]);
        assert_eq!(m.score_parts("a", &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(m.score_parts("a", &[3.0, 0.0]).unwrap(), 4.0);
        assert_eq!(
            m.score_parts("a", &[3.0]),
            Err(ScorerError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn replay_lookup() {
        let mut scores = BTreeMap::new();
        scores.insert("a".to_string(), 7.5);
        let m = ScorerModel::replay(scores, "replay").unwrap();
        assert_eq!(m.score_parts("a", &[]).unwrap(), 7.5);
        assert_eq!(m.score_parts("b", &[]), Err(ScorerError::UnknownSampleId("b".into())));
        let mut buf = TrainingBuffer::new();
        assert_eq!(
            m.refit(&[vec![0.0]], &RefitPolicy::default(), &mut buf),
            Err(ScorerError::ReplayNotTrainable)
        );
    }

    #[test]
    fn refit_full_replacement_matches_fresh_fit() {
        let old = gaussian(vec![5.0, 5.0], vec![2.0, 2.0]);
        let k = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let policy = RefitPolicy {
            mode: RefitMode::CurrentSliceOnly,
            blend_alpha: 1.0,
            ..RefitPolicy::default()
        };
        let out = old.refit(&k, &policy, &mut TrainingBuffer::new()).unwrap();
        let fresh = ScorerModel::fit(ScorerKind::DiagGaussian, &k, &ScorerConfig::default(), "x").unwrap();
        assert_eq!(out.model.params, fresh.params);
        assert_eq!(out.model.version, 1);
        assert!(!out.noop);
    }

    #[test]
    fn refit_zero_alpha_keeps_statistics() {
        let old = gaussian(vec![5.0, 5.0], vec![2.0, 2.0]);
        let policy = RefitPolicy {
            blend_alpha: 0.0,
            ..RefitPolicy::default()
        };
        let out = old
            .refit(&[vec![0.0, 1.0]], &policy, &mut TrainingBuffer::new())
            .unwrap();
        assert_eq!(out.model.params, old.params);
        assert_eq!(out.model.version, 1);
    }

    #[test]
    fn refit_half_alpha_blends_means() {
        let old = gaussian(vec![0.0, 0.0], vec![1.0, 1.0]);
        let policy = RefitPolicy {
            mode: RefitMode::CurrentSliceOnly,
            blend_alpha: 0.5,
            ..RefitPolicy::default()
        };
        let k = vec![vec![1.0, 1.0], vec![3.0, 3.0]];
        let out = old.refit(&k, &policy, &mut TrainingBuffer::new()).unwrap();
        let (mean, var) = moments_of(&out.model);
        assert_eq!(mean, &[1.0, 1.0]);
        // new population variance 1 + eps, old 1.
        assert!((var[0] - (1.0 + EPS / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn refit_empty_is_noop() {
        let old = gaussian(vec![0.0], vec![1.0]);
        let empty: Vec<Vec<f64>> = vec![];
        let out = old
            .refit(&empty, &RefitPolicy::default(), &mut TrainingBuffer::new())
            .unwrap();
        assert!(out.noop);
        assert_eq!(out.model, old);
    }

    #[test]
    fn replay_buffer_accumulates_fifo() {
        let old = gaussian(vec![0.0], vec![1.0]);
        let policy = RefitPolicy {
            mode: RefitMode::ReplayBuffer,
            buffer_capacity: 3,
            blend_alpha: 1.0,
        };
        let mut buf = TrainingBuffer::new();
        let m1 = old.refit(&[vec![0.0], vec![0.0]], &policy, &mut buf).unwrap().model;
        let m2 = m1.refit(&[vec![6.0], vec![6.0]], &policy, &mut buf).unwrap().model;
        assert_eq!(buf.len(), 3);
        // buffer = [0, 6, 6]
        let (mean, _) = moments_of(&m2);
        assert_eq!(mean, &[4.0]);
        assert_eq!(m2.version, 2);
    }

    #[test]
    fn refit_rejects_bad_policy_and_dimension() {
        let old = gaussian(vec![0.0], vec![1.0]);
        let bad = RefitPolicy {
            blend_alpha: 1.5,
            ..RefitPolicy::default()
        };
        assert!(old.refit(&[vec![0.0]], &bad, &mut TrainingBuffer::new()).is_err());
        assert!(matches!(
            old.refit(&[vec![0.0, 1.0]], &RefitPolicy::default(), &mut TrainingBuffer::new()),
            Err(ScorerError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_json_shape() {
        let m = gaussian(vec![1.0], vec![2.0]);
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["kind"], "diag_gaussian");
        assert_eq!(v["version"], 0);
        assert_eq!(v["provenance"], "test");
        let back: ScorerModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
        let bad = gaussian(vec![1.0], vec![0.0]);
        assert!(bad.validate().is_err());
    }
}
