//! Threshold-free curves (ROC, PR), the equal-error-rate threshold search and
//! the scalar error metrics: FPR/FNR, BER and EBI.
//!
//! EBI is the harmonic mean of `1 - FPR` and `1 - FNR`. Compared to BER (the
//! arithmetic mean of the two error rates) it drops sharply when one error type
//! dominates the other.
//!
//! Curve and threshold inputs are `(score, label)` pairs with the anomalous
//! class as positive and higher scores meaning more anomalous.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfusionCounts, LabelKind, ThresholdState};

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum MetricsError {
    #[error("rate undefined: at least one class has no samples")]
    EmptyClass,
    #[error("rate {0} is outside [0, 1]")]
    Domain(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite score in input")]
    NonFiniteScore,
}

/// `(fpr, fnr)` for a confusion matrix.
pub fn rates(c: &ConfusionCounts) -> Result<(f64, f64), MetricsError> {
    let negatives = c.negatives();
    let positives = c.positives();
    if negatives == 0 || positives == 0 {
        return Err(MetricsError::EmptyClass);
    }
    Ok((c.fp as f64 / negatives as f64, c.fn_ as f64 / positives as f64))
}

/// Fraction of anomalies among all samples.
pub fn anomaly_rate(normal: u64, anomalous: u64) -> Result<f64, MetricsError> {
    let total = normal + anomalous;
    if total == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(anomalous as f64 / total as f64)
}

fn check_rate(r: f64) -> Result<f64, MetricsError> {
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(MetricsError::Domain(r))
    }
}

/// Error Balance Index. Defined as 0 when both rates are 1.
pub fn ebi(fpr: f64, fnr: f64) -> Result<f64, MetricsError> {
    let specificity = 1.0 - check_rate(fpr)?;
    let sensitivity = 1.0 - check_rate(fnr)?;
    let sum = specificity + sensitivity;
    if sum == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * specificity * sensitivity / sum)
}

/// Balanced error rate.
pub fn ber(fpr: f64, fnr: f64) -> Result<f64, MetricsError> {
    Ok((check_rate(fpr)? + check_rate(fnr)?) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn class_counts(data: &[(f64, LabelKind)]) -> Result<(u64, u64), MetricsError> {
    let mut pos = 0u64;
    let mut neg = 0u64;
    for &(score, label) in data {
        if !score.is_finite() {
            return Err(MetricsError::NonFiniteScore);
        }
        match label {
            LabelKind::Anomalous => pos += 1,
            LabelKind::Normal => neg += 1,
        }
    }
    Ok((pos, neg))
}

fn sorted_descending(data: &[(f64, LabelKind)]) -> Vec<(f64, LabelKind)> {
    let mut v = data.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

/// Walks score groups in descending order, yielding `(score, tp, fp)` after
/// each group of tied scores has been absorbed.
fn descending_groups(sorted: &[(f64, LabelKind)]) -> impl Iterator<Item = (f64, u64, u64)> + '_ {
    let mut i = 0;
    let mut tp = 0u64;
    let mut fp = 0u64;
    core::iter::from_fn(move || {
        if i >= sorted.len() {
            return None;
        }
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            match sorted[i].1 {
                LabelKind::Anomalous => tp += 1,
                LabelKind::Normal => fp += 1,
            }
            i += 1;
        }
        Some((score, tp, fp))
    })
}

/// ROC curve with one point per distinct score (ties grouped), bracketed by
/// the `(0, 0)` and `(1, 1)` sentinels. Thresholds are descending; a point's
/// threshold classifies `score >= threshold` as anomalous.
pub fn roc_points(data: &[(f64, LabelKind)]) -> Result<Vec<CurvePoint>, MetricsError> {
    let (pos, neg) = class_counts(data)?;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::EmptyClass);
    }
    let sorted = sorted_descending(data);
    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(CurvePoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    });
    for (score, tp, fp) in descending_groups(&sorted) {
        points.push(CurvePoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(CurvePoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(points)
}

/// Trapezoidal area under a ROC curve ordered by ascending FPR.
pub fn auc_roc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Average precision: sum over tied score groups, in descending order, of
/// recall gained times precision at that group. No interpolation.
pub fn auc_pr(data: &[(f64, LabelKind)]) -> Result<f64, MetricsError> {
    let (pos, _) = class_counts(data)?;
    if pos == 0 {
        return Err(MetricsError::EmptyClass);
    }
    let sorted = sorted_descending(data);
    let mut ap = 0.0;
    let mut prev_tp = 0u64;
    for (_, tp, fp) in descending_groups(&sorted) {
        if tp > prev_tp {
            let recall_gain = (tp - prev_tp) as f64 / pos as f64;
            ap += recall_gain * tp as f64 / (tp + fp) as f64;
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Operating point selected by [`eer_operating_point`], with the integer
/// counts it was chosen from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerPoint {
    pub theta: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub negatives: u64,
    pub positives: u64,
}

impl EerPoint {
    pub fn into_state(self, calibration_round: u32, scorer_version: u32) -> ThresholdState {
        ThresholdState {
            theta: self.theta,
            fpr_at_theta: self.fpr,
            fnr_at_theta: self.fnr,
            calibration_round,
            scorer_version,
        }
    }
}

/// `x - 1`, or the adjacent float when `x` is too large for that to move it.
fn next_below(x: f64) -> f64 {
    let y = x - 1.0;
    if y < x {
        return y;
    }
    if x == 0.0 {
        return -f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits - 1 } else { bits + 1 })
}

fn next_above(x: f64) -> f64 {
    -next_below(-x)
}

/// A threshold `t` with `lo < t <= hi`, as close to the midpoint as floats allow.
fn midpoint_between(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

/// Cross-multiplied comparison key for a candidate: `|fp*P - fn*N|` orders
/// candidates exactly like `|FPR - FNR|`.
fn imbalance(fp: u64, fn_: u64, neg: u64, pos: u64) -> u128 {
    let a = fp as u128 * pos as u128;
    let b = fn_ as u128 * neg as u128;
    a.abs_diff(b)
}

/// EBI as an exact fraction `(num, den)`; `den == 0` is normalised to `(0, 1)`.
fn ebi_fraction(fp: u64, fn_: u64, neg: u64, pos: u64) -> (u128, u128) {
    let tn = (neg - fp) as u128;
    let tp = (pos - fn_) as u128;
    let num = 2 * tn * tp;
    let den = tn * pos as u128 + tp * neg as u128;
    if den == 0 {
        (0, 1)
    } else {
        (num, den)
    }
}

/// Equal-error-rate threshold search.
///
/// Candidates are the midpoints between consecutive distinct scores plus one
/// threshold below the minimum and one above the maximum, so the chosen
/// threshold is never itself a data score. Picks the candidate minimising
/// `|FPR - FNR|`, then the higher EBI, then the lower threshold. The reported
/// rates are the ones actually achieved; nothing is interpolated.
pub fn eer_operating_point(data: &[(f64, LabelKind)]) -> Result<EerPoint, MetricsError> {
    let (pos, neg) = class_counts(data)?;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::EmptyClass);
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    struct Candidate {
        imbalance: u128,
        ebi: (u128, u128),
        theta: f64,
        fp: u64,
        fn_: u64,
    }

    // Ascending sweep. Before group i, everything below is predicted normal.
    let mut best: Option<Candidate> = None;
    let mut consider = |theta: f64, fp: u64, fn_: u64| {
        let key = imbalance(fp, fn_, neg, pos);
        let e = ebi_fraction(fp, fn_, neg, pos);
        let better = match &best {
            None => true,
            Some(b) => match key.cmp(&b.imbalance) {
                Ordering::Less => true,
                Ordering::Greater => false,
                // Candidates arrive in ascending theta, so equal EBI keeps the earlier one.
                Ordering::Equal => e.0 * b.ebi.1 > b.ebi.0 * e.1,
            },
        };
        if better {
            best = Some(Candidate {
                imbalance: key,
                ebi: e,
                theta,
                fp,
                fn_,
            });
        }
    };

    let min = sorted[0].0;
    let max = sorted[sorted.len() - 1].0;
    consider(next_below(min), neg, 0);

    let mut neg_below = 0u64;
    let mut pos_below = 0u64;
    let mut i = 0;
    let mut prev: Option<f64> = None;
    while i < sorted.len() {
        let score = sorted[i].0;
        if let Some(lo) = prev {
            consider(midpoint_between(lo, score), neg - neg_below, pos_below);
        }
        while i < sorted.len() && sorted[i].0 == score {
            match sorted[i].1 {
                LabelKind::Anomalous => pos_below += 1,
                LabelKind::Normal => neg_below += 1,
            }
            i += 1;
        }
        prev = Some(score);
    }
    consider(next_above(max), 0, pos);

    let Candidate { theta, fp, fn_, .. } = best.expect("at least two candidates");
    Ok(EerPoint {
        theta,
        fpr: fp as f64 / neg as f64,
        fnr: fn_ as f64 / pos as f64,
        false_positives: fp,
        false_negatives: fn_,
        negatives: neg,
        positives: pos,
    })
}

/// [`eer_operating_point`] packaged as a round-0 [`ThresholdState`].
pub fn eer_threshold(data: &[(f64, LabelKind)]) -> Result<ThresholdState, MetricsError> {
    Ok(eer_operating_point(data)?.into_state(0, 0))
}

/// Linear-interpolation quantile (`h = (n - 1) p`) over an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = libm::floor(h) as usize;
    let hi = libm::ceil(h) as usize;
    let frac = h - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Quartiles of a set of EBI values (fractions in `[0, 1]`).
///
/// Q3 here is the conventional 75th percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbiSummary {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub n: usize,
}

impl EbiSummary {
    /// `(q1, median, q3)` scaled to percentages.
    pub fn percent(&self) -> (f64, f64, f64) {
        (self.q1 * 100.0, self.median * 100.0, self.q3 * 100.0)
    }
}

pub fn ebi_summary(values: &[f64]) -> Result<EbiSummary, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&sorted, p).expect("non-empty");
    Ok(EbiSummary {
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        n: sorted.len(),
    })
}
