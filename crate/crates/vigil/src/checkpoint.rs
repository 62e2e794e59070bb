//! Resumable run checkpoints, written when an annotation barrier times out.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vigil_core::annotation::AnnotationVerdict;
use vigil_core::PipelineState;

use crate::config::RunConfig;
use crate::io::{check_version, read_json, write_json, DataError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Where the run was parked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Barrier {
    /// Waiting on warm-up verdicts. Everything before this point is
    /// recomputed from the dataset and config.
    Warmup,
    /// Waiting on verdicts for the slice at `position` in the dataset.
    Slice {
        position: usize,
        slice_index: i64,
        state: Box<PipelineState>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub barrier: Barrier,
    /// Verdicts already received for the parked barrier.
    pub answered: Vec<AnnotationVerdict>,
    pub pending_request_ids: Vec<String>,
    /// Verdicts for every earlier barrier, in the order they were applied.
    pub history: Vec<AnnotationVerdict>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let value: serde_json::Value = read_json(path)?;
        check_version(path, &value, "format_version", u64::from(CHECKPOINT_FORMAT_VERSION))?;
        serde_json::from_value(value).map_err(|e| DataError::json(path, e))
    }
}
