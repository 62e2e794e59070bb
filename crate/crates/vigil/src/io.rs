//! Dataset ingestion, score files and report persistence.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vigil_core::metrics::{ebi, rates};
use vigil_core::pipeline::{ConfigIssue, REPORT_SCHEMA_VERSION};
use vigil_core::{LabelKind, RunReport, Sample};

use crate::datagen::{DatasetManifest, FileEntry, DATASET_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: expected {expected} features, got {got}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}:{line}: duplicate id {id}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("{path}: manifest lists {expected} records, file has {found}")]
    ManifestMismatch { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: unsupported version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, expected: u64, found: u64 },
    #[error("invalid spec: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidSpec(Vec<ConfigIssue>),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl DataError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub seq: u64,
    pub slice: i64,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelKind>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            seq: s.seq,
            slice: s.slice_index,
            features: s.features.clone(),
            label: s.ground_truth,
        }
    }
}

impl From<SampleRecord> for Sample {
    fn from(r: SampleRecord) -> Self {
        Sample {
            id: r.id,
            seq: r.seq,
            slice_index: r.slice,
            features: r.features,
            ground_truth: r.label,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path).map(BufReader::new).map_err(|e| DataError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DataError::io(path, e))
}

/// Parses non-blank lines as JSON, passing 1-based line numbers along.
fn read_json_lines<T, F>(path: &Path, mut each: F) -> Result<(), DataError>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<(), DataError>,
{
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| DataError::parse(path, i + 1, e.to_string()))?;
        each(i + 1, value)?;
    }
    Ok(())
}

/// Loads and validates a dataset file, grouped by slice in ascending order.
///
/// Every record must have finite features of one common dimension and a
/// unique id, and `seq` must increase strictly within each slice.
pub fn load_samples(path: &Path) -> Result<Vec<Vec<Sample>>, DataError> {
    let mut groups: BTreeMap<i64, Vec<Sample>> = BTreeMap::new();
    let mut ids = HashSet::new();
    let mut dim = None;
    read_json_lines(path, |line, rec: SampleRecord| {
        if rec.features.iter().any(|x| !x.is_finite()) {
            return Err(DataError::parse(path, line, "non-finite feature value"));
        }
        let expected = *dim.get_or_insert(rec.features.len());
        if rec.features.len() != expected {
            return Err(DataError::DimensionMismatch {
                path: path.to_path_buf(),
                line,
                expected,
                got: rec.features.len(),
            });
        }
        if !ids.insert(rec.id.clone()) {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: rec.id,
            });
        }
        let group = groups.entry(rec.slice).or_default();
        if let Some(prev) = group.last() {
            if rec.seq <= prev.seq {
                return Err(DataError::parse(
                    path,
                    line,
                    format!("seq {} does not follow {} in slice {}", rec.seq, prev.seq, rec.slice),
                ));
            }
        }
        group.push(rec.into());
        Ok(())
    })?;
    Ok(groups.into_values().collect())
}

/// Like [`load_samples`] but flattened into file order per slice.
pub fn load_stream(path: &Path) -> Result<Vec<Sample>, DataError> {
    Ok(load_samples(path)?.into_iter().flatten().collect())
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let mut w = create(path)?;
    for s in samples {
        serde_json::to_writer(&mut w, &SampleRecord::from(s)).map_err(|e| DataError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// A dataset loaded through its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub source: Vec<Sample>,
    pub warm: Vec<Sample>,
    pub slices: Vec<Vec<Sample>>,
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?;
    check_version(path, &value, "format_version", u64::from(DATASET_FORMAT_VERSION))?;
    serde_json::from_value(value).map_err(|e| DataError::json(path, e))
}

pub(crate) fn check_version(
    path: &Path,
    value: &serde_json::Value,
    field: &str,
    expected: u64,
) -> Result<(), DataError> {
    match value.get(field).and_then(serde_json::Value::as_u64) {
        Some(found) if found == expected => Ok(()),
        Some(found) => Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        }),
        None => Err(DataError::parse(path, 1, format!("missing {field}"))),
    }
}

fn load_entry(root: &Path, entry: &FileEntry, d: usize) -> Result<Vec<Sample>, DataError> {
    let path = root.join(&entry.path);
    let samples = load_stream(&path)?;
    let found = samples.len() as u64;
    if found != entry.samples {
        return Err(DataError::ManifestMismatch {
            path,
            expected: entry.samples,
            found,
        });
    }
    if let Some(s) = samples.iter().find(|s| s.features.len() != d) {
        return Err(DataError::DimensionMismatch {
            path,
            line: s.seq as usize + 1,
            expected: d,
            got: s.features.len(),
        });
    }
    Ok(samples)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let source = load_entry(root, &manifest.source, manifest.d)?;
    let warm = load_entry(root, &manifest.warm, manifest.d)?;
    let slices = manifest
        .slices
        .iter()
        .map(|e| load_entry(root, e, manifest.d))
        .collect::<Result<_, _>>()?;
    Ok(Dataset {
        manifest,
        source,
        warm,
        slices,
    })
}

/// One line of a score file: a precomputed score per sample id, optionally
/// with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelKind>,
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>, DataError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    read_json_lines(path, |line, rec: ScoreRecord| {
        if !rec.score.is_finite() {
            return Err(DataError::parse(path, line, "non-finite score"));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: rec.id,
            });
        }
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| DataError::json(path, e))?;
    w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::json(path, e))
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<(), DataError> {
    write_json(path, report)
}

pub fn read_report(path: &Path) -> Result<RunReport, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?;
    check_version(path, &value, "schema_version", u64::from(REPORT_SCHEMA_VERSION))?;
    serde_json::from_value(value).map_err(|e| DataError::json(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub slice: String,
    pub theta: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub ebi: Option<f64>,
    pub requests: u64,
    pub reviewed: u64,
    pub auto_tp: u64,
    pub k_size: u64,
}

/// One row per slice plus a trailing `cumulative` row.
pub fn summary_rows(report: &RunReport) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = report
        .per_slice
        .iter()
        .map(|s| {
            let (fpr, fnr) = rates(&s.confusion).map_or((None, None), |(f, n)| (Some(f), Some(n)));
            SummaryRow {
                slice: s.slice_index.to_string(),
                theta: s.threshold_used.theta,
                tp: s.confusion.tp,
                fp: s.confusion.fp,
                tn: s.confusion.tn,
                fn_: s.confusion.fn_,
                fnr,
                fpr,
                ebi: fpr.zip(fnr).and_then(|(f, n)| ebi(f, n).ok()),
                requests: s.annotation_requests,
                reviewed: s.annotation_reviewed,
                auto_tp: s.auto_tp,
                k_size: s.k_size,
            }
        })
        .collect();
    let sum = |f: fn(&vigil_core::SliceReport) -> u64| report.per_slice.iter().map(f).sum();
    let c = report.cumulative;
    rows.push(SummaryRow {
        slice: "cumulative".into(),
        theta: report.threshold_trajectory.last().map_or(f64::NAN, |t| t.theta),
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
        fnr: report.cumulative_fnr,
        fpr: report.cumulative_fpr,
        ebi: report.cumulative_ebi,
        requests: sum(|s| s.annotation_requests),
        reviewed: sum(|s| s.annotation_reviewed),
        auto_tp: sum(|s| s.auto_tp),
        k_size: sum(|s| s.k_size),
    });
    rows
}

pub fn write_summary_csv(report: &RunReport, path: &Path) -> Result<(), DataError> {
    let csv_err = |e| DataError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in summary_rows(report) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn nan_feature_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            "{\"id\":\"a\",\"seq\":0,\"slice\":0,\"features\":[1.0]}\n{\"id\":\"b\",\"seq\":1,\"slice\":0,\"features\":[NaN]}\n",
        );
        match load_samples(&p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_order_seq_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            "{\"id\":\"a\",\"seq\":5,\"slice\":0,\"features\":[1.0]}\n{\"id\":\"b\",\"seq\":3,\"slice\":0,\"features\":[1.0]}\n",
        );
        assert!(matches!(load_samples(&p), Err(DataError::Parse { line: 2, .. })));
        let p = write(
            dir.path(),
            "b.jsonl",
            "{\"id\":\"a\",\"seq\":0,\"slice\":0,\"features\":[1.0]}\n{\"id\":\"a\",\"seq\":1,\"slice\":1,\"features\":[1.0]}\n",
        );
        assert!(matches!(load_samples(&p), Err(DataError::DuplicateId { line: 2, .. })));
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"seq\":0,\"slice\":0,\"features\":[1.0]}\n{\"id\":\"b\",\"seq\":1,\"slice\":0,\"features\":[1.0,2.0]}\n",
        );
        assert!(matches!(
            load_samples(&p),
            Err(DataError::DimensionMismatch {
                line: 2,
                expected: 1,
                got: 2,
                ..
            })
        ));
    }

    #[test]
    fn slices_come_back_ascending() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            "{\"id\":\"a\",\"seq\":0,\"slice\":3,\"features\":[1.0]}\n\n{\"id\":\"b\",\"seq\":0,\"slice\":1,\"features\":[2.0],\"label\":\"anomalous\"}\n",
        );
        let groups = load_samples(&p).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0][0].id, "b");
        assert_eq!(groups[0][0].ground_truth, Some(LabelKind::Anomalous));
        assert_eq!(groups[1][0].ground_truth, None);
    }

    #[test]
    fn unlabeled_records_omit_label_field() {
        let s = Sample {
            id: "x".into(),
            seq: 0,
            slice_index: 0,
            features: vec![0.1],
            ground_truth: None,
        };
        let line = serde_json::to_string(&SampleRecord::from(&s)).unwrap();
        assert_eq!(line, "{\"id\":\"x\",\"seq\":0,\"slice\":0,\"features\":[0.1]}");
    }
}
