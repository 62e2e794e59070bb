#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use vigil::config::RunConfig;
use vigil::datagen::{generate, Gaussian, SyntheticStreamSpec};
use vigil_core::{LabelKind, Methodology, Verdict};

/// A small drifting stream that runs in well under a second.
pub fn small_spec(seed: u64) -> SyntheticStreamSpec {
    let d = 4;
    SyntheticStreamSpec {
        d,
        normal_source: Gaussian::isotropic(d, 0.0, 1.0),
        normal_target: Gaussian::isotropic(d, 1.0, 1.5),
        anomaly_source: Gaussian::isotropic(d, 4.0, 1.0),
        anomaly_target: Gaussian::isotropic(d, 3.0, 1.5),
        drift_schedule: Vec::new(),
        slices: 3,
        samples_per_slice: 1500,
        train_anomaly_rate: 0.02,
        warm_samples: 600,
        warm_anomaly_rate: 0.5,
        source_samples: 800,
        source_anomaly_rate: 0.5,
        seed,
    }
}

/// The nine-slice drift benchmark: 10,000 samples per slice at a 0.5%
/// anomaly rate, drifting from halfway between source and target to the
/// target itself.
pub fn drift_benchmark(seed: u64) -> SyntheticStreamSpec {
    let d = 8;
    SyntheticStreamSpec {
        d,
        normal_source: Gaussian::isotropic(d, 0.0, 1.0),
        normal_target: Gaussian::isotropic(d, 1.0, 1.6),
        anomaly_source: Gaussian::isotropic(d, 4.0, 1.0),
        anomaly_target: Gaussian::isotropic(d, 3.0, 1.6),
        drift_schedule: (0..9).map(|t| 0.5 + 0.5 * t as f64 / 8.0).collect(),
        slices: 9,
        samples_per_slice: 10_000,
        train_anomaly_rate: 0.005,
        warm_samples: 4000,
        warm_anomaly_rate: 0.5,
        source_samples: 4000,
        source_anomaly_rate: 0.5,
        seed,
    }
}

/// Generates `spec` under `dir/data` and returns the manifest path.
pub fn dataset(dir: &Path, spec: &SyntheticStreamSpec) -> PathBuf {
    let data = dir.join("data");
    generate(spec, &data).expect("generate dataset");
    data.join("manifest.json")
}

pub fn config(manifest: &Path, out: &Path, methodology: Methodology) -> RunConfig {
    let mut cfg = RunConfig::new(manifest, out);
    cfg.methodology = methodology;
    cfg
}

/// Ground truth by sample id, for clients that answer honestly.
pub fn truth_table(manifest: &Path) -> HashMap<String, LabelKind> {
    let ds = vigil::load_dataset(manifest).expect("load dataset");
    ds.warm
        .iter()
        .chain(ds.slices.iter().flatten())
        .filter_map(|s| s.ground_truth.map(|t| (s.id.clone(), t)))
        .collect()
}

pub fn honest(label: LabelKind) -> Verdict {
    match label {
        LabelKind::Anomalous => Verdict::Tp,
        LabelKind::Normal => Verdict::Fp,
    }
}
