//! Offline metrics over score files and run directories.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vigil_core::metrics::{
    auc_pr, auc_roc, ber, ebi, ebi_summary, eer_operating_point, roc_points, EbiSummary, MetricsError,
};
use vigil_core::{LabelKind, Methodology};

use crate::io::{read_report, DataError, ScoreRecord};
use crate::runner::REPORT_FILE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetrics {
    pub n: usize,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub eer_theta: f64,
    pub eer_fpr: f64,
    pub eer_fnr: f64,
    pub ebi: f64,
    pub ber: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("score record {0} has no label")]
    MissingLabel(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no runs found")]
    NoRuns,
}

/// Threshold-free and EER metrics for a labeled score file.
pub fn score_metrics(records: &[ScoreRecord]) -> Result<ScoreMetrics, AnalysisError> {
    let data: Vec<(f64, LabelKind)> = records
        .iter()
        .map(|r| {
            r.label
                .map(|l| (r.score, l))
                .ok_or_else(|| AnalysisError::MissingLabel(r.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let eer = eer_operating_point(&data)?;
    Ok(ScoreMetrics {
        n: data.len(),
        auc_roc: auc_roc(&roc_points(&data)?),
        auc_pr: auc_pr(&data)?,
        eer_theta: eer.theta,
        eer_fpr: eer.fpr,
        eer_fnr: eer.fnr,
        ebi: ebi(eer.fpr, eer.fnr)?,
        ber: ber(eer.fpr, eer.fnr)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodologySummary {
    pub methodology: Methodology,
    pub runs: usize,
    pub summary: EbiSummary,
}

/// Quartiles of cumulative EBI per methodology over run directories (each
/// holding a `report.json`). Runs without a defined cumulative EBI are
/// skipped.
pub fn summarize_runs<P: AsRef<Path>>(dirs: &[P]) -> Result<Vec<MethodologySummary>, AnalysisError> {
    let mut groups: BTreeMap<&'static str, (Methodology, Vec<f64>)> = BTreeMap::new();
    for dir in dirs {
        let dir = dir.as_ref();
        let path = if dir.is_dir() {
            dir.join(REPORT_FILE)
        } else {
            dir.to_path_buf()
        };
        let report = read_report(&path)?;
        if let Some(e) = report.cumulative_ebi {
            groups
                .entry(report.methodology.as_str())
                .or_insert_with(|| (report.methodology, Vec::new()))
                .1
                .push(e);
        }
    }
    if groups.is_empty() {
        return Err(AnalysisError::NoRuns);
    }
    let mut out: Vec<MethodologySummary> = groups
        .into_values()
        .map(|(m, values)| {
            Ok(MethodologySummary {
                methodology: m,
                runs: values.len(),
                summary: ebi_summary(&values)?,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    out.sort_by_key(|s| Methodology::ALL.iter().position(|m| *m == s.methodology));
    Ok(out)
}
