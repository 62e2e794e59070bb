//! Seeded synthetic streams with gradual domain drift.
//!
//! A dataset is a directory holding `manifest.json` plus one JSON-lines file
//! per stream: `source.jsonl` (pure source domain, used to pretrain and
//! calibrate the source scorer), `warm.jsonl` (pure target domain at the warm
//! anomaly rate) and `slice_00.jsonl` onwards, whose parameters are linearly
//! interpolated from source to target by the drift schedule.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vigil_core::pipeline::ConfigIssue;
use vigil_core::{LabelKind, Sample};

use crate::io::{write_samples, DataError};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Axis-aligned Gaussian: per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Gaussian {
    pub fn isotropic(d: usize, mean: f64, scale: f64) -> Self {
        Self {
            mean: vec![mean; d],
            scale: vec![scale; d],
        }
    }

    /// `(1 - lambda) * self + lambda * other`, parameter-wise.
    pub fn lerp(&self, other: &Gaussian, lambda: f64) -> Gaussian {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect();
        Gaussian {
            mean: mix(&self.mean, &other.mean),
            scale: mix(&self.scale, &other.scale),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.scale)
            .map(|(m, s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s * z
            })
            .collect()
    }

    fn issues(&self, path: &str, d: usize, out: &mut Vec<ConfigIssue>) {
        if self.mean.len() != d {
            out.push(ConfigIssue::new(
                format!("{path}.mean"),
                format!("expected {d} values, got {}", self.mean.len()),
            ));
        }
        if self.scale.len() != d {
            out.push(ConfigIssue::new(
                format!("{path}.scale"),
                format!("expected {d} values, got {}", self.scale.len()),
            ));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            out.push(ConfigIssue::new(format!("{path}.mean"), "values must be finite"));
        }
        if self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            out.push(ConfigIssue::new(
                format!("{path}.scale"),
                "values must be finite and positive",
            ));
        }
    }
}

fn default_slices() -> usize {
    9
}
fn default_train_rate() -> f64 {
    0.005
}
fn default_warm_rate() -> f64 {
    0.5
}
fn default_source_samples() -> usize {
    4000
}
fn default_source_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticStreamSpec {
    pub d: usize,
    pub normal_source: Gaussian,
    pub normal_target: Gaussian,
    pub anomaly_source: Gaussian,
    pub anomaly_target: Gaussian,
    /// Interpolation weight per slice. Empty means a linear ramp from 0 on
    /// the first slice to 1 on the last.
    #[serde(default)]
    pub drift_schedule: Vec<f64>,
    #[serde(default = "default_slices")]
    pub slices: usize,
    pub samples_per_slice: usize,
    #[serde(default = "default_train_rate")]
    pub train_anomaly_rate: f64,
    pub warm_samples: usize,
    #[serde(default = "default_warm_rate")]
    pub warm_anomaly_rate: f64,
    #[serde(default = "default_source_samples")]
    pub source_samples: usize,
    #[serde(default = "default_source_rate")]
    pub source_anomaly_rate: f64,
    pub seed: u64,
}

impl SyntheticStreamSpec {
    pub fn schedule(&self) -> Vec<f64> {
        if !self.drift_schedule.is_empty() {
            return self.drift_schedule.clone();
        }
        match self.slices {
            0 => Vec::new(),
            1 => vec![1.0],
            s => (0..s).map(|t| t as f64 / (s - 1) as f64).collect(),
        }
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.d == 0 {
            out.push(ConfigIssue::new("d", "must be positive"));
        }
        self.normal_source.issues("normal_source", self.d, &mut out);
        self.normal_target.issues("normal_target", self.d, &mut out);
        self.anomaly_source.issues("anomaly_source", self.d, &mut out);
        self.anomaly_target.issues("anomaly_target", self.d, &mut out);
        if self.slices == 0 {
            out.push(ConfigIssue::new("slices", "must be positive"));
        }
        if !self.drift_schedule.is_empty() {
            if self.drift_schedule.len() != self.slices {
                out.push(ConfigIssue::new(
                    "drift_schedule",
                    format!("expected {} weights, got {}", self.slices, self.drift_schedule.len()),
                ));
            }
            if self.drift_schedule.iter().any(|l| !(0.0..=1.0).contains(l)) {
                out.push(ConfigIssue::new("drift_schedule", "weights must lie in [0, 1]"));
            }
            if self.drift_schedule.windows(2).any(|w| w[1] < w[0]) {
                out.push(ConfigIssue::new("drift_schedule", "weights must be non-decreasing"));
            }
        }
        for (name, value) in [
            ("train_anomaly_rate", self.train_anomaly_rate),
            ("warm_anomaly_rate", self.warm_anomaly_rate),
            ("source_anomaly_rate", self.source_anomaly_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                out.push(ConfigIssue::new(name, "must lie in [0, 1]"));
            }
        }
        for (name, value) in [
            ("samples_per_slice", self.samples_per_slice),
            ("warm_samples", self.warm_samples),
            ("source_samples", self.source_samples),
        ] {
            if value == 0 {
                out.push(ConfigIssue::new(name, "must be positive"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub slice: i64,
    pub lambda: f64,
    pub samples: u64,
    pub normal: u64,
    pub anomalous: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub d: usize,
    pub seed: u64,
    pub source: FileEntry,
    pub warm: FileEntry,
    pub slices: Vec<FileEntry>,
    pub spec: SyntheticStreamSpec,
}

pub const SOURCE_SLICE: i64 = -2;
pub const WARM_SLICE: i64 = -1;

struct StreamPlan<'a> {
    stream: u64,
    prefix: String,
    slice: i64,
    lambda: f64,
    n: usize,
    rate: f64,
    spec: &'a SyntheticStreamSpec,
}

impl StreamPlan<'_> {
    fn draw(&self) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(self.stream);
        let normal = self.spec.normal_source.lerp(&self.spec.normal_target, self.lambda);
        let anomaly = self.spec.anomaly_source.lerp(&self.spec.anomaly_target, self.lambda);
        (0..self.n)
            .map(|i| {
                let anomalous = rng.random_bool(self.rate);
                let (dist, label) = if anomalous {
                    (&anomaly, LabelKind::Anomalous)
                } else {
                    (&normal, LabelKind::Normal)
                };
                Sample {
                    id: format!("{}-{i:06}", self.prefix),
                    seq: i as u64,
                    slice_index: self.slice,
                    features: dist.draw(&mut rng),
                    ground_truth: Some(label),
                }
            })
            .collect()
    }
}

fn entry(path: &str, slice: i64, lambda: f64, samples: &[Sample]) -> FileEntry {
    let anomalous = samples
        .iter()
        .filter(|s| s.ground_truth == Some(LabelKind::Anomalous))
        .count() as u64;
    FileEntry {
        path: path.into(),
        slice,
        lambda,
        samples: samples.len() as u64,
        normal: samples.len() as u64 - anomalous,
        anomalous,
    }
}

/// Source stream, warm-up stream and the drifting slices.
pub type Streams = (Vec<Sample>, Vec<Sample>, Vec<Vec<Sample>>);

/// Draws every stream of `spec` in memory, in manifest order:
/// source, warm, then the slices.
pub fn draw_streams(spec: &SyntheticStreamSpec) -> Result<Streams, DataError> {
    let issues = spec.issues();
    if !issues.is_empty() {
        return Err(DataError::InvalidSpec(issues));
    }
    let plan = |stream, prefix: String, slice, lambda, n, rate| StreamPlan {
        stream,
        prefix,
        slice,
        lambda,
        n,
        rate,
        spec,
    };
    let source = plan(
        0,
        "src".into(),
        SOURCE_SLICE,
        0.0,
        spec.source_samples,
        spec.source_anomaly_rate,
    )
    .draw();
    let warm = plan(
        1,
        "warm".into(),
        WARM_SLICE,
        1.0,
        spec.warm_samples,
        spec.warm_anomaly_rate,
    )
    .draw();
    let slices = spec
        .schedule()
        .into_iter()
        .enumerate()
        .map(|(t, lambda)| {
            plan(
                2 + t as u64,
                format!("s{t:02}"),
                t as i64,
                lambda,
                spec.samples_per_slice,
                spec.train_anomaly_rate,
            )
            .draw()
        })
        .collect();
    Ok((source, warm, slices))
}

/// Writes the dataset for `spec` under `out` and returns its manifest.
/// Identical specs produce byte-identical files.
pub fn generate(spec: &SyntheticStreamSpec, out: &Path) -> Result<DatasetManifest, DataError> {
    let (source, warm, slices) = draw_streams(spec)?;
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;

    write_samples(&out.join("source.jsonl"), &source)?;
    write_samples(&out.join("warm.jsonl"), &warm)?;
    let schedule = spec.schedule();
    let mut entries = Vec::with_capacity(slices.len());
    for (t, slice) in slices.iter().enumerate() {
        let name = format!("slice_{t:02}.jsonl");
        write_samples(&out.join(&name), slice)?;
        entries.push(entry(&name, t as i64, schedule[t], slice));
    }

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        d: spec.d,
        seed: spec.seed,
        source: entry("source.jsonl", SOURCE_SLICE, 0.0, &source),
        warm: entry("warm.jsonl", WARM_SLICE, 1.0, &warm),
        slices: entries,
        spec: spec.clone(),
    };
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_spec(path: &Path) -> Result<SyntheticStreamSpec, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::json(path, e))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> SyntheticStreamSpec {
        SyntheticStreamSpec {
            d: 3,
            normal_source: Gaussian::isotropic(3, 0.0, 1.0),
            normal_target: Gaussian::isotropic(3, 2.0, 1.5),
            anomaly_source: Gaussian::isotropic(3, 5.0, 1.0),
            anomaly_target: Gaussian::isotropic(3, 5.0, 1.0),
            drift_schedule: Vec::new(),
            slices: 9,
            samples_per_slice: 10_000,
            train_anomaly_rate: 0.005,
            warm_samples: 20_000,
            warm_anomaly_rate: 0.5,
            source_samples: 100,
            source_anomaly_rate: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn slice_anomaly_counts_are_binomial() {
        let (_, warm, slices) = draw_streams(&spec()).unwrap();
        let sigma = (10_000.0f64 * 0.005 * 0.995).sqrt();
        for s in &slices {
            let k = s
                .iter()
                .filter(|x| x.ground_truth == Some(LabelKind::Anomalous))
                .count() as f64;
            assert!((k - 50.0).abs() <= 3.0 * sigma, "{k}");
        }
        let w = warm
            .iter()
            .filter(|x| x.ground_truth == Some(LabelKind::Anomalous))
            .count() as f64;
        assert!((w / 20_000.0 - 0.5).abs() <= 0.015);
    }

    #[test]
    fn linear_ramp_and_constant_schedules() {
        let s = spec();
        let lam = s.schedule();
        assert_eq!(lam.len(), 9);
        assert_eq!((lam[0], lam[8]), (0.0, 1.0));
        let flat = SyntheticStreamSpec {
            drift_schedule: vec![0.0; 9],
            ..spec()
        };
        let a = flat.normal_source.lerp(&flat.normal_target, flat.schedule()[0]);
        let b = flat.normal_source.lerp(&flat.normal_target, flat.schedule()[8]);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_spec_lists_fields() {
        let bad = SyntheticStreamSpec {
            drift_schedule: vec![0.5, 0.2],
            train_anomaly_rate: 1.5,
            normal_target: Gaussian::isotropic(2, 0.0, 1.0),
            ..spec()
        };
        let paths: Vec<String> = bad.issues().into_iter().map(|i| i.path).collect();
        for p in [
            "drift_schedule",
            "train_anomaly_rate",
            "normal_target.mean",
            "normal_target.scale",
        ] {
            assert!(paths.iter().any(|x| x == p), "{p} missing from {paths:?}");
        }
    }
}
