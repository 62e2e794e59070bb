//! Active-learning adaptation of anomaly scorers and their decision
//! thresholds to a new deployment domain.
//!
//! The crate is `no_std` with `alloc`: all IO, transport and file formats live
//! in the companion `vigil` crate.
//!
//! - [`model`]: labels, samples, confusion counts, thresholds, validation sets
//! - [`metrics`]: ROC/PR curves, AUCs, EER threshold search, FPR/FNR, BER, EBI
//! - [`scorer`]: the scorer contract with Gaussian, k-NN and replay scorers
//! - [`annotation`]: annotators, the ground-truth oracle, the AL-Light band
//! - [`pipeline`]: warm-up and the per-slice active-learning loop

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod annotation;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scorer;

pub use annotation::{
    AnnotationRequest, AnnotationVerdict, Annotator, BandMode, OracleAnnotator, RollingBandState, ScriptedAnnotator,
    Verdict, VerdictSource,
};
pub use metrics::{EbiSummary, MetricsError};
pub use model::{
    ConfusionCounts, LabelKind, Methodology, PseudoLabel, Sample, ScoredSample, ThresholdState, ValidationSet,
};
pub use pipeline::{Pipeline, PipelineConfig, PipelineError, PipelineState, RunReport, SliceReport, ThresholdPolicy};
pub use scorer::{RefitMode, RefitPolicy, ScorerConfig, ScorerKind, ScorerModel};
